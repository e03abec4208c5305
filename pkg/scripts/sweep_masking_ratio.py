"""Run the masking-ratio grid (0.5 / 0.6 / 0.7 / 0.8) and write the report."""

import argparse
import sys

from maskduo.config import load_config
from maskduo.experiments import run_sweep, write_report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/sweep_ratio")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--resume", action="store_true", help="skip cells already recorded as ok")
    args = ap.parse_args()

    cfg = load_config(profile="toy", overrides=[
        f"out_dir={args.out}",
        f"train.seed={args.seed}",
        f"train.epochs={args.epochs}",
        "train.warmup_epochs=1",
    ])
    outcome = run_sweep("masking_ratio", cfg, resume=args.resume)
    report = write_report(args.out)
    print(f"results: {outcome['csv']}")
    print(f"plot:    {outcome['plot']}")
    print(f"report:  {report}")
    if outcome["failures"]:
        print(f"failed cells: {outcome['failures']}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
