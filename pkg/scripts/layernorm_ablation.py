"""Certified radius with the mean-only layer norm versus the standard one on matched seeds."""
import argparse

import numpy as np

from certiformer.verifier import certify_epsilon
from _common import instance


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--models", type=int, default=12)
    ap.add_argument("--p", default="2")
    ap.add_argument("--seed", type=int, default=400)
    args = ap.parse_args()

    ratios = []
    for k in range(args.models):
        rng = np.random.default_rng(args.seed + k)
        mod, ids = instance(args.seed + k)
        std, _ = instance(args.seed + k, ln="standard")
        pos = (int(rng.integers(1, len(ids) + 1)),)
        e_mod = certify_epsilon(mod, ids, pos, args.p).certified_epsilon
        e_std = certify_epsilon(std, ids, pos, args.p).certified_epsilon
        ratios.append(e_mod / e_std)
        print(f"seed {args.seed + k}: layers {mod.hyper.num_layers} modified {e_mod:.4g}  "
              f"standard {e_std:.4g}  ratio {ratios[-1]:.2f}")
    print(f"median ratio {np.median(ratios):.2f}")


if __name__ == "__main__":
    main()
