"""Train the LayerScale model and its post-norm twin on shape_class with paired seeds."""

import argparse
import json
from pathlib import Path

from vit5 import ablation as A
from vit5.data import SynthSpec
from vit5.train import TrainSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--out", default="runs/layerscale_vs_postnorm")
    args = ap.parse_args()
    summary = {}
    for seed in (int(s) for s in args.seeds.split(",")):
        spec = TrainSpec(steps=args.steps, seed=seed)
        rep = A.run_ablation_matrix(A.table1(), SynthSpec(), spec, out_dir=Path(args.out) / f"seed{seed}",
                                    suite="table1")
        print(f"seed {seed}\n{rep.render()}")
        summary[seed] = {r["name"]: r["eval_accuracy"] for r in rep.rows}
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")


if __name__ == "__main__":
    main()
