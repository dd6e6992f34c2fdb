"""Command-line entry point: train, fuse, trace, check.

Exit codes are a stable contract: 0 success, 1 runtime failure, 2 usage
error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import MolfError
from .fusion import fuse, verify_fusion
from .harness import export_traces, load_config_file, train_run
from .rng import Rng
from .selfcheck import run_selfcheck


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="molf",
        description="Superposed FFT+LoRA expert training with optimizer-level routing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training config")
    p_train.add_argument("--config", required=True, help="flat key=value config file")
    p_train.add_argument("--seed", type=int, default=None,
                         help="override the config seed (beats MOLF_SEED)")
    p_train.add_argument("--out", default=None, help="run directory (overrides out_dir)")

    p_fuse = sub.add_parser("fuse", help="collapse experts into base weights")
    p_fuse.add_argument("--ckpt", required=True, help="checkpoint directory to fuse")
    p_fuse.add_argument("--out", required=True, help="output checkpoint directory")
    p_fuse.add_argument("--tol", type=float, default=1e-9,
                        help="max relative deviation allowed (default 1e-9)")
    p_fuse.add_argument("--probes", type=int, default=100,
                        help="random probes per module (default 100)")
    p_fuse.add_argument("--probe-seed", type=int, default=0)

    p_trace = sub.add_parser("trace", help="export routing traces of a run dir")
    p_trace.add_argument("--run", required=True, help="run directory")

    p_check = sub.add_parser("check", help="run the built-in oracle suite")
    p_check.add_argument("--seeds", type=int, default=20,
                         help="seeds for the gradient check (default 20)")
    return parser


def _cmd_train(args) -> int:
    cfg = load_config_file(args.config)
    if args.out is not None:
        cfg.out_dir = args.out
    summary = train_run(cfg, seed_override=args.seed)
    print(f"run dir:          {summary.out_dir}")
    print(f"steps:            {summary.steps}")
    print(f"final train loss: {summary.final_train_loss:.6g}")
    if summary.final_population_loss is not None:
        print(f"population loss:  {summary.final_population_loss:.6g}")
    for kind, frac in sorted(summary.class_fractions.items()):
        print(f"selection[{kind}]:  {frac:.3f}")
    print(f"checkpoint:       {summary.checkpoint_path}")
    return 0


def _cmd_fuse(args) -> int:
    loaded = load_checkpoint(args.ckpt)
    rng = Rng(args.probe_seed)
    failed = False
    for mod in loaded.network.modules:
        report = verify_fusion(mod, args.probes, rng, tol=args.tol)
        status = "ok" if report.passed else "FAIL"
        print(f"{mod.name}: max rel deviation {report.max_rel_deviation:.3e} [{status}]")
        failed = failed or not report.passed
    if failed:
        print("fusion verification failed", file=sys.stderr)
        return 1
    for mod in loaded.network.modules:
        fuse(mod, collapse=True)
    out = save_checkpoint(Path(args.out), loaded.network, step=loaded.step)
    print(f"fused checkpoint: {out}")
    return 0


def _cmd_trace(args) -> int:
    grid, summary = export_traces(args.run)
    print(f"winner grid:   {grid}")
    print(f"winner summary: {summary}")
    return 0


def _cmd_check(args) -> int:
    results = run_selfcheck(verbose=True)
    return 0 if all(r.passed for r in results) else 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    handlers = {
        "train": _cmd_train,
        "fuse": _cmd_fuse,
        "trace": _cmd_trace,
        "check": _cmd_check,
    }
    try:
        return handlers[args.command](args)
    except MolfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
