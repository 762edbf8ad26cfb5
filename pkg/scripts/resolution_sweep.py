"""Paired resolution sweep: ViT-5 against its APE-only twin, trained at 32px."""

import argparse
from pathlib import Path

from vit5 import ablation as A
from vit5.data import SynthSpec
from vit5.train import TrainSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--resolutions", default="24,32,48,64")
    ap.add_argument("--out", default="runs/resolution_sweep")
    args = ap.parse_args()
    resolutions = tuple(int(r) for r in args.resolutions.split(","))
    wins = 0
    seeds = [int(s) for s in args.seeds.split(",")]
    for seed in seeds:
        rows = A.res_sweep(SynthSpec(), TrainSpec(steps=args.steps, seed=seed), resolutions,
                           out_dir=Path(args.out) / f"seed{seed}")
        print(A.sweep_csv(rows), end="")
        if 32 in resolutions and 48 in resolutions:
            d5 = A.accuracy_drop(rows, "vit5", 32, 48)
            da = A.accuracy_drop(rows, "ape_only", 32, 48)
            wins += d5 <= da
            print(f"seed {seed}: drop 32->48 vit5 {d5:+.3f}  ape_only {da:+.3f}\n")
    print(f"vit5 drop <= ape_only drop in {wins}/{len(seeds)} seeds")


if __name__ == "__main__":
    main()
