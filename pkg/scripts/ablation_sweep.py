#!/usr/bin/env python3
"""Train the full model and the single-component-removed variants over
several seeds and print the comparison table (thin wrapper over the
`videoground ablate` subcommand).

Example:
    python3 scripts/ablation_sweep.py --steps 1500 --seeds 3 \
        --json runs/ablation.json
"""

import argparse
import sys

from videoground import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variants",
                    default="full,no-retrieval,no-pyramid,no-shifted")
    ap.add_argument("--json", default=None)
    args = ap.parse_args()

    argv = ["ablate", "--seed", str(args.seed),
            "--variants", args.variants,
            "--steps", str(args.steps),
            "--episodes", str(args.episodes),
            "--seeds", str(args.seeds)]
    if args.json:
        argv += ["--json", args.json]
    sys.exit(cli.main(argv))


if __name__ == "__main__":
    main()
