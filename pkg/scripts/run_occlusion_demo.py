"""Occlusion template in every communication mode, one seed.

Prints payload, collaborator count and coverage of the hidden vehicle.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from slimcomm import harness

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "occlusion.json"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path, default=CONFIG)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="write one metrics.csv per mode here")
    args = p.parse_args()
    rows = []
    for mode in harness.MODES:
        out = args.out / mode if args.out else None
        res = harness.run_scenario(harness.RunConfig(args.config, mode=mode, seed=args.seed, out_dir=out))
        s = res.summary()
        rows.append(
            {
                "mode": mode,
                "payload_bytes": int(s["mean_payload_bytes"]),
                "collaborators": s["mean_collaborators"],
                "visible_coverage": round(s["mean_visible_coverage"], 3),
                "occluded_coverage": round(s["mean_occluded_coverage"], 3),
            }
        )
    print(harness.to_markdown(rows), end="")


if __name__ == "__main__":
    main()
