#!/usr/bin/env python3
"""Reconstruction-loss ablation: perceptual vs plain MSE, over several seeds.

Reports held-out foreground ARI for models trained under matched budgets.
"""

import argparse
import json

from partdiscover.data import SyntheticDataset
from partdiscover.experiments import desk_config, desk_spec, fg_ari, train_on_synthetic


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=500)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = parser.parse_args()

    results = []
    for seed in args.seeds:
        dataset = SyntheticDataset(desk_spec(count=500, seed=seed))
        row = {"seed": seed}
        for recon in ("perceptual", "mse"):
            cfg = desk_config(seed=seed, steps=args.steps, reconstruction=recon)
            state, _ = train_on_synthetic(cfg, dataset)
            row[recon] = fg_ari(state, dataset)
        row["perceptual_wins"] = row["perceptual"] > row["mse"]
        results.append(row)
        print(json.dumps(row))
    wins = sum(r["perceptual_wins"] for r in results)
    print(f"perceptual wins {wins}/{len(results)} seeds")


if __name__ == "__main__":
    main()
