"""Fully-forward, fully-backward and hybrid bounds: radius, wall time and materialized entries."""
import argparse

import numpy as np

from certiformer.verifier import run_ablation
from _common import instance


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--models", type=int, default=4)
    ap.add_argument("--layers", type=int, default=1)
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    pairs = [instance(args.seed + k, layers=args.layers, n=args.n) for k in range(args.models)]
    rows = run_ablation([m for m, _ in pairs], [ids for _, ids in pairs], max_sets=args.n)
    names = {"ff": "fully-forward", "fb": "fully-backward", "bf": "backward+forward"}
    for p in ("1", "2", "inf"):
        sel = [r for r in rows if r["p"] == p]
        print(f"l_{p}")
        for m, label in names.items():
            ok = [r["methods"][m] for r in sel if "error" not in r["methods"][m]]
            mn = np.mean([c["min"] for c in ok])
            avg = np.mean([c["avg"] for c in ok])
            secs = np.mean([c["seconds"] for c in ok])
            lam = np.mean([c["lambda_entries"] for c in ok])
            print(f"  {label:17s} min {mn:.4f}  avg {avg:.4f}  time {secs:7.2f}s  lambda {lam:.3g}")


if __name__ == "__main__":
    main()
