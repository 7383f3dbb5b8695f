#!/usr/bin/env python3
"""Regenerate the bundled procedural toy dataset (data/toy/hr/*.png)."""

import argparse

from qssm.data import TOY_ROOT, make_toy_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default=TOY_ROOT)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    paths = make_toy_dataset(args.root, seed=args.seed)
    for p in paths:
        print(p)


if __name__ == "__main__":
    main()
