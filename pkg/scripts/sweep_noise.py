"""Pose-noise robustness grid, seed-averaged."""

from __future__ import annotations

import argparse
from pathlib import Path

from slimcomm import harness

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "occlusion.json"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path, default=CONFIG)
    p.add_argument("--mode", choices=harness.MODES, default="slimcomm")
    p.add_argument("--sigma-pos", type=float, nargs="+", default=[0.0, 0.3, 0.6])
    p.add_argument("--sigma-yaw", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out", type=Path, default=None, help="optional CSV path")
    args = p.parse_args()
    run = harness.RunConfig(args.config, mode=args.mode)
    rows = harness.sweep_noise(run, args.sigma_pos, args.sigma_yaw, range(args.seeds))
    print(harness.to_markdown(rows), end="")
    if args.out is not None:
        harness.write_table(args.out, rows)


if __name__ == "__main__":
    main()
