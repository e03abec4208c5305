"""Command-line front door.

Subcommands: pretrain, probe, finetune, sweep, export, report.  All of
them accept ``--config`` (YAML), ``--profile`` (toy | paper-base),
repeated ``--set section.key=value`` overrides, and ``--out``.

Exit codes: 0 success; 1 a run or at least one sweep cell failed;
2 bad usage or configuration.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .config import apply_overrides, load_config
from .experiments import run_finetune, run_pretrain, run_probe, run_sweep, write_report
from .evaluation import FINETUNE_PRESETS
from .training import DuoTrainer

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskduo",
        description="Masked spectrogram modeling with a momentum target encoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--profile", choices=["toy", "paper-base"], help="base profile")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a setting, e.g. --set train.masking_ratio=0.7",
        )
        p.add_argument("--out", help="output directory (overrides out_dir)")

    p = sub.add_parser("pretrain", help="self-supervised pre-training run")
    add_common(p)

    p = sub.add_parser("probe", help="linear probe on frozen clip features")
    add_common(p)
    p.add_argument("--encoder", help="exported encoder archive (.npz)")
    p.add_argument(
        "--random-init",
        action="store_true",
        help="probe a randomly initialized encoder instead of a trained one",
    )

    p = sub.add_parser("finetune", help="fine-tune an exported encoder")
    add_common(p)
    p.add_argument("--encoder", required=True, help="exported encoder archive (.npz)")
    p.add_argument("--preset", default="esc50", choices=sorted(FINETUNE_PRESETS))
    p.add_argument("--epochs", type=int, help="override the preset's epoch count")
    p.add_argument("--warmup-epochs", type=int, help="override the preset's warmup")
    p.add_argument("--batch-size", type=int, help="override the preset's batch size")
    p.add_argument("--lr", type=float, help="override the preset's learning rate")

    p = sub.add_parser("sweep", help="run an ablation grid")
    add_common(p)
    p.add_argument("kind", choices=["masking_ratio", "target_input"])
    p.add_argument("--resume", action="store_true", help="skip cells already recorded as ok")

    p = sub.add_parser("export", help="extract the encoder from a trainer checkpoint")
    p.add_argument("--checkpoint", required=True, help="trainer checkpoint (.npz)")
    p.add_argument("--encoder-out", required=True, help="where to write the encoder archive")

    p = sub.add_parser("report", help="summarize a sweep directory into markdown")
    p.add_argument("--out", required=True, help="sweep output directory holding results.csv")

    return parser


def _config_from(args) -> "RunConfig":
    cfg = load_config(path=args.config, profile=args.profile, overrides=args.overrides)
    if args.out:
        cfg = apply_overrides(cfg, [f"out_dir={args.out}"])
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "export":
            trainer = DuoTrainer.restore(args.checkpoint)
            path = trainer.export_encoder(args.encoder_out)
            print(f"encoder written to {path}")
            return 0
        if args.command == "report":
            path = write_report(args.out)
            print(f"report written to {path}")
            return 0
        cfg = _config_from(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "pretrain":
            summary = run_pretrain(cfg)
            print(json.dumps(summary, indent=2))
            return 0
        if args.command == "probe":
            if bool(args.encoder) == bool(args.random_init):
                print("error: pass exactly one of --encoder or --random-init", file=sys.stderr)
                return 2
            result = run_probe(cfg, encoder_path=args.encoder)
            print(
                json.dumps(
                    {
                        "train_top1": result.train_top1,
                        "test_top1": result.test_top1,
                        "test_map": result.test_map,
                    },
                    indent=2,
                )
            )
            return 0
        if args.command == "finetune":
            tweaks = {
                key: getattr(args, key)
                for key in ("epochs", "warmup_epochs", "batch_size", "lr")
                if getattr(args, key) is not None
            }
            overrides = None
            if tweaks:
                overrides = dataclasses.replace(FINETUNE_PRESETS[args.preset], **tweaks)
            result = run_finetune(cfg, args.encoder, preset=args.preset, overrides=overrides)
            print(json.dumps({"test_top1": result.test_top1, "test_map": result.test_map}, indent=2))
            return 0
        if args.command == "sweep":
            outcome = run_sweep(args.kind, cfg, resume=args.resume)
            print(json.dumps(outcome, indent=2))
            return 1 if outcome["failures"] else 0
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
