"""Command line entry point: ``diffseg <subcommand> [--config FILE] [--key value ...]``.

Every :class:`RunConfig` key can be overridden with ``--key value`` (dashes and
underscores are interchangeable).  Usage, config and data errors exit with
status 2, file-system errors with status 1; either way a single ``error: ...``
line goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import DiffSegError
from .config import FIELD_TYPES, load_config
from .train import run_evaluate, run_finetune, run_pretrain, run_sample, run_sweep

COMMANDS = ("synth", "pretrain", "finetune", "evaluate", "sample", "sweep")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise DiffSegError(f"usage: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help="output directory (config key out_dir)")
    for key in FIELD_TYPES:
        if key in ("stage", "out_dir"):
            continue
        flags = {f"--{key}", f"--{key.replace('_', '-')}"}
        p.add_argument(*sorted(flags), dest=key, default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffseg", description="diffusion-pretrained segmentation runs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = sub.add_parser("synth", help="write a synthetic image/mask dataset and manifest")
    synth.add_argument("--out", required=True)
    synth.add_argument("--n", type=int, default=50)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--side", type=int, default=64)
    synth.add_argument("--patch-size", type=int, default=64)
    synth.add_argument("--stride", type=int, default=64)
    synth.add_argument("--fractions", default="0.6,0.3,0.1",
                       help="unlabeled,train,test or unlabeled,train,validation,test")

    for name in ("pretrain", "finetune", "evaluate", "sample"):
        _add_config_flags(sub.add_parser(name, help=f"run the {name} stage"))
    sweep = sub.add_parser("sweep", help="one fine-tuning run per value of a config key")
    _add_config_flags(sweep)
    sweep.add_argument("--param", required=True)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    return parser


def _config_from_args(args, stage: str):
    overrides = {k: getattr(args, k) for k in FIELD_TYPES
                 if getattr(args, k, None) is not None}
    if args.out:
        overrides["out_dir"] = args.out
    overrides["stage"] = stage
    return load_config(args.config, **overrides)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth":
        from ..data import write_synth_dataset

        fractions = [float(v) for v in args.fractions.split(",")]
        m = write_synth_dataset(args.out, args.n, args.side, args.seed, fractions,
                                patch_size=args.patch_size, stride=args.stride)
        _print({"manifest": str(m.root / "manifest.txt"), "images": len(m.entries)})
        return 0
    stage = "finetune" if args.command == "sweep" else args.command
    cfg = _config_from_args(args, stage)
    if args.command == "pretrain":
        res = run_pretrain(cfg)
        _print({"checkpoint": res.checkpoint, "epoch_losses": res.epoch_losses})
    elif args.command == "finetune":
        res = run_finetune(cfg)
        _print({"checkpoint": res.checkpoint, "best_epoch": res.best_epoch,
                **{k: res.metrics[k] for k in ("accuracy", "precision", "recall", "f1")}})
    elif args.command == "evaluate":
        m = run_evaluate(cfg)
        _print({k: m[k] for k in ("accuracy", "precision", "recall", "f1")})
    elif args.command == "sample":
        _print({"files": [str(p) for p in run_sample(cfg)]})
    else:
        _print(run_sweep(cfg, args.param.replace("-", "_"), args.values.split(",")))
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except DiffSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
