"""Certified radii from interval propagation and the hybrid method next to substitution upper bounds.

Prints Min / Avg over position sets for each (norm, t) cell, averaged over
the seeded models.
"""
import argparse

import numpy as np

from certiformer.verifier import set_upper_bound, verify
from _common import fmt, instance


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--models", type=int, default=4)
    ap.add_argument("--layers", type=int, default=1)
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print(f"{'p':>4} {'t':>2} | {'upper':>8} | {'ibp min':>9} {'ibp avg':>9} | {'bf min':>9} {'bf avg':>9}")
    for p in ("1", "2", "inf"):
        for t in (1, 2):
            cells = {"ibp": [], "bf": [], "upper": []}
            for k in range(args.models):
                model, ids = instance(args.seed + k, layers=args.layers, n=args.n)
                for m in ("ibp", "bf"):
                    rep = verify(model, ids, p, t, m, max_sets=32)
                    cells[m].append((rep.min_epsilon, rep.avg_epsilon))
                cells["upper"].append(min(set_upper_bound(model, ids, (i,), p) for i in range(1, len(ids) + 1)))
            ibp, bf = np.mean(cells["ibp"], 0), np.mean(cells["bf"], 0)
            print(f"{p:>4} {t:>2} | {fmt(np.min(cells['upper'])):>8} | {fmt(ibp[0]):>9} {fmt(ibp[1]):>9} "
                  f"| {fmt(bf[0]):>9} {fmt(bf[1]):>9}")


if __name__ == "__main__":
    main()
