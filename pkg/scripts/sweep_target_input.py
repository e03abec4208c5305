"""Ablate what the momentum encoder sees: masked tokens only vs all tokens.

Covers the 2x2 grid of target input mode x masking ratio {0.6, 0.7} and
writes the usual CSV/plot/report trio.  The interesting row pair is
masked-only vs all-patches at the same ratio; the report records the
direction for this run without claiming it generalizes.
"""

import argparse
import sys

from maskduo.config import load_config
from maskduo.experiments import run_sweep, write_report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/sweep_target")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--resume", action="store_true")
    args = ap.parse_args()

    cfg = load_config(profile="toy", overrides=[
        f"out_dir={args.out}",
        f"train.seed={args.seed}",
        f"train.epochs={args.epochs}",
        "train.warmup_epochs=1",
    ])
    outcome = run_sweep("target_input", cfg, resume=args.resume)
    report = write_report(args.out)
    print(f"results: {outcome['csv']}")
    print(f"report:  {report}")
    if outcome["failures"]:
        print(f"failed cells: {outcome['failures']}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
