"""Run every built-in ablation suite at a shared, short budget."""

import argparse
from pathlib import Path

from vit5 import ablation as A
from vit5.data import SynthSpec
from vit5.train import TrainSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--warmup", type=int, default=20)
    ap.add_argument("--suites", default=",".join(sorted(A.SUITES)))
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/ablations")
    args = ap.parse_args()
    spec = TrainSpec(steps=args.steps, warmup=args.warmup)
    for suite in args.suites.split(","):
        rep = A.run_ablation_matrix(A.suite_rows(suite), SynthSpec(), spec, out_dir=Path(args.out) / suite,
                                    workers=args.workers, suite=suite)
        print(f"== {suite}\n{rep.render()}")


if __name__ == "__main__":
    main()
