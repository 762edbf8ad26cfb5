"""Loss spikes and NaNs with and without QK-Norm at an inflated learning rate."""

import argparse

from vit5.config import ModelConfig
from vit5.data import SynthSpec
from vit5.train import TrainSpec, spike_metrics, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--multiplier", type=float, default=10.0)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    total = {}
    for qk in ("on", "off"):
        total[qk] = 0
        for seed in (int(s) for s in args.seeds.split(",")):
            spec = TrainSpec(steps=args.steps, seed=seed, spike_lr_multiplier=args.multiplier)
            _, rec = train(ModelConfig(qk_norm=qk), SynthSpec(), spec)
            spikes, nans = spike_metrics(rec)
            total[qk] += spikes + 10 * nans
            print(f"qk_norm={qk} seed {seed}: spikes {spikes} nans {nans} eval {rec.final_eval()}")
    print(f"spikes + 10*nans: on {total['on']}  off {total['off']}")


if __name__ == "__main__":
    main()
