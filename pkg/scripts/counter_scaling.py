"""Materialized coefficient entries per bound pass as the sequence grows."""
import argparse

import numpy as np

from certiformer.bounds import PerturbationSpec
from certiformer.engine import BoundEngine
from certiformer.model import forward_eval
from _common import instance


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lengths", type=int, nargs="+", default=[4, 8, 16])
    ap.add_argument("--d", type=int, default=8)
    ap.add_argument("--seed", type=int, default=900)
    args = ap.parse_args()

    spec = PerturbationSpec(2, 0.01, (1,))
    prev = {}
    for n in args.lengths:
        model, ids = instance(args.seed, layers=1, heads=2, d=args.d, n=n)
        label = int(np.argmax(forward_eval(model, ids)))
        line = [f"n={n:3d}"]
        for m in ("bf", "fb"):
            res = BoundEngine(model, ids, label, m).run(spec)
            growth = f" (x{res.lambda_entries / prev[m]:.2f})" if m in prev else ""
            line.append(f"{m} {res.lambda_entries:>10d}{growth:9s} {res.seconds:6.3f}s")
            prev[m] = res.lambda_entries
        print("  ".join(line))


if __name__ == "__main__":
    main()
