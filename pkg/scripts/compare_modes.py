"""Seed-averaged comparison of all communication modes."""

from __future__ import annotations

import argparse
from pathlib import Path

from slimcomm import harness

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "occlusion.json"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path, default=CONFIG)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out", type=Path, default=None, help="optional CSV path")
    args = p.parse_args()
    rows = harness.compare_modes(harness.RunConfig(args.config), range(args.seeds))
    print(harness.to_markdown(rows), end="")
    if args.out is not None:
        harness.write_table(args.out, rows)


if __name__ == "__main__":
    main()
