"""Command-line entry point: ``slimcomm <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .scene import ConfigError


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, type=Path, help="scenario JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paper-shapes", action="store_true", help="full (128, 256, 512) channels")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)


def _mode(args) -> str:
    for flag, mode in (("no_erp", "no-erp"), ("no_hrp", "no-hrp"), ("no_halo", "no-halo")):
        if getattr(args, flag, False):
            return mode
    return args.mode


def _run_config(args, **overrides) -> harness.RunConfig:
    return harness.RunConfig(
        scenario=args.config,
        mode=overrides.pop("mode", getattr(args, "mode", "slimcomm")),
        tau=getattr(args, "tau", None),
        seed=args.seed,
        paper_shapes=args.paper_shapes,
        frames=args.frames,
        **overrides,
    )


def _write_rows(out: Path, name: str, rows: list[dict]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    harness.write_table(out / f"{name}.csv", rows)
    (out / f"{name}.md").write_text(harness.to_markdown(rows))
    sys.stdout.write(harness.to_markdown(rows))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="slimcomm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one scenario in one mode")
    _common(run)
    run.add_argument("--mode", choices=harness.MODES, default="slimcomm")
    run.add_argument("--tau", type=float, default=None)
    ablation = run.add_mutually_exclusive_group()
    ablation.add_argument("--no-erp", action="store_true")
    ablation.add_argument("--no-hrp", action="store_true")
    ablation.add_argument("--no-halo", action="store_true")
    run.add_argument("--sigma-pos", type=float, default=None, help="ego position noise std (m)")
    run.add_argument("--sigma-yaw", type=float, default=None, help="ego heading noise std (deg)")
    run.add_argument(
        "--halo-at", choices=("anchor", "fine"), default="anchor", help="centre halos on anchors or fine points"
    )
    run.add_argument("--dump-messages", type=Path, default=None)
    run.add_argument("--dump-fused", type=Path, default=None)

    st = sub.add_parser("sweep-tau", help="communication threshold sweep")
    _common(st)
    st.add_argument("--mode", choices=harness.MODES, default="slimcomm")
    st.add_argument("--taus", type=_floats, default=[0.0, 0.25, 0.5, 0.75])

    sn = sub.add_parser("sweep-noise", help="pose-noise robustness sweep")
    _common(sn)
    sn.add_argument("--mode", choices=harness.MODES, default="slimcomm")
    sn.add_argument("--tau", type=float, default=None)
    sn.add_argument("--sigma-pos", type=_floats, default=[0.0, 0.3, 0.6])
    sn.add_argument("--sigma-yaw", type=_floats, default=[0.0, 0.5, 1.0])
    sn.add_argument("--seeds", type=int, default=20)

    cmp_ = sub.add_parser("compare", help="all communication modes side by side")
    _common(cmp_)
    cmp_.add_argument("--tau", type=float, default=None)
    cmp_.add_argument("--seeds", type=int, default=20)

    gc = sub.add_parser("check-gradients", help="finite-difference gradient checks")
    gc.add_argument("--probes", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--eps", type=float, default=1e-4)
    gc.add_argument("--out", type=Path, default=None)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    try:
        if args.command == "run":
            noise = args.sigma_pos is not None or args.sigma_yaw is not None
            cfg = _run_config(
                args,
                mode=_mode(args),
                noise=noise,
                sigma_pos=args.sigma_pos or 0.0,
                sigma_yaw_deg=args.sigma_yaw or 0.0,
                out_dir=args.out,
                dump_messages=args.dump_messages,
                dump_fused=args.dump_fused,
                halo_at=args.halo_at,
            )
            res = harness.run_scenario(cfg)
            print(json.dumps(res.summary(), indent=2, sort_keys=True))
        elif args.command == "sweep-tau":
            _write_rows(args.out, "sweep_tau", harness.sweep_tau(_run_config(args), args.taus))
        elif args.command == "sweep-noise":
            rows = harness.sweep_noise(_run_config(args), args.sigma_pos, args.sigma_yaw, range(args.seeds))
            _write_rows(args.out, "sweep_noise", rows)
        elif args.command == "compare":
            _write_rows(args.out, "compare", harness.compare_modes(_run_config(args), range(args.seeds)))
        elif args.command == "check-gradients":
            report = harness.check_gradients(args.probes, args.seed, args.eps)
            text = json.dumps(report, indent=2, sort_keys=True)
            print(text)
            if args.out is not None:
                args.out.mkdir(parents=True, exist_ok=True)
                (args.out / "gradients.json").write_text(text + "\n")
            if max(report["offset_loss_max_rel_err"], report["attention_logits_max_rel_err"]) >= 1e-4:
                return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
