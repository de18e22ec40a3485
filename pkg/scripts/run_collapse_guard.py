#!/usr/bin/env python3
"""Area-loss collapse guard: train with and without the area term.

Without it the concentration objective is satisfied by pushing everything
into the background channel; the run reports the mean background probability
mass for both arms.
"""

import argparse
import json

from partdiscover.experiments import collapse_guard


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--count", type=int, default=500)
    args = parser.parse_args()
    out = collapse_guard(seed=args.seed, steps=args.steps, count=args.count)
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
