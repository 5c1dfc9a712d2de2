#!/usr/bin/env python3
"""Train the four {filtering, msa} ablations and tabulate the results.

Desk-scale stand-in for the component ablation study: same data, same seed,
same step budget for every configuration.
"""

import argparse

from mdtaf.data import SynthSpec, generate_samples
from mdtaf.model import desk_config
from mdtaf.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = generate_samples(SynthSpec(size=args.size, count=args.count,
                                    seed=args.seed, noise_sigma=0.15))
    print(f"{'filtering':>9}  {'msa':>5}  {'params':>8}  {'loss':>7}  "
          f"{'dice':>6}  {'acc':>6}")
    for filtering in (True, False):
        for msa in (True, False):
            cfg = desk_config(filtering=filtering, msa=msa)
            tcfg = TrainConfig(batch_size=args.count, max_steps=args.steps,
                               lr_max=3e-4, seed=args.seed)
            params, history = train(cfg, tcfg, ds)
            loss = [h["loss"] for h in history if "loss" in h][-1]
            final = history[-1]
            print(f"{str(filtering):>9}  {str(msa):>5}  "
                  f"{params.param_count():>8}  {loss:>7.4f}  "
                  f"{final['dice']:>6.3f}  {final['acc']:>6.3f}")


if __name__ == "__main__":
    main()
