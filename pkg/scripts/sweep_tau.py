"""Communication-threshold sweep on one or more scenarios."""

from __future__ import annotations

import argparse
from pathlib import Path

from slimcomm import harness

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("configs", nargs="*", type=Path, default=[CONFIGS / "occlusion.json", CONFIGS / "dense.json"])
    p.add_argument("--taus", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    for cfg in args.configs:
        rows = harness.sweep_tau(harness.RunConfig(cfg, seed=args.seed), args.taus)
        print(f"## {cfg.stem}\n")
        print(harness.to_markdown(rows))


if __name__ == "__main__":
    main()
