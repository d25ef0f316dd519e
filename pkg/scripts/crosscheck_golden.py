"""Recompute the golden logits with a plain-Python forward pass (no numpy, no package code).

Reads model.json / model.bin directly, so a disagreement points at either the
file format or the numpy implementation.
"""
import argparse
import json
import math
import struct
import sys
from pathlib import Path


def load(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    blob = (directory / manifest.get("weights_file", "model.bin")).read_bytes()
    tensors = {}
    for name, entry in manifest["tensors"].items():
        count = 1
        for s in entry["shape"]:
            count *= s
        flat = list(struct.unpack_from(f"<{count}f", blob, entry["offset"]))
        tensors[name] = reshape(flat, entry["shape"])
    return manifest["hyper"], tensors


def reshape(flat, shape):
    if len(shape) <= 1:
        return flat
    step = len(flat) // shape[0]
    return [reshape(flat[i * step:(i + 1) * step], shape[1:]) for i in range(shape[0])]


def matvec(W, x, b):
    return [sum(w * v for w, v in zip(row, x)) + bi for row, bi in zip(W, b)]


def layer_norm(x, w, b, mode, eps):
    d = len(x)
    mu = sum(x) / d
    c = [v - mu for v in x]
    if mode == "none":
        return x
    if mode == "modified":
        return [wi * ci + bi for wi, ci, bi in zip(w, c, b)]
    var = sum(v * v for v in c) / d
    s = math.sqrt(var + eps)
    return [wi * ci / s + bi for wi, ci, bi in zip(w, c, b)]


def forward(hyper, t, ids):
    n, d, H = len(ids), hyper["d_model"], hyper["num_heads"]
    dh = d // H
    mode, eps = hyper.get("layernorm_mode", "modified"), hyper.get("layernorm_eps", 1e-5)
    h = [[e + p for e, p in zip(t["embed"][i], t["pos_enc"][r])] for r, i in enumerate(ids)]
    for li in range(hyper["num_layers"]):
        g = lambda k: t[f"layers.{li}.{k}"]  # noqa: E731
        q = [matvec(g("wq"), x, g("bq")) for x in h]
        k = [matvec(g("wk"), x, g("bk")) for x in h]
        v = [matvec(g("wv"), x, g("bv")) for x in h]
        attn = [[0.0] * d for _ in range(n)]
        for head in range(H):
            sl = slice(head * dh, (head + 1) * dh)
            for i in range(n):
                scores = [sum(a * b for a, b in zip(q[i][sl], k[j][sl])) / math.sqrt(dh) for j in range(n)]
                top = max(scores)
                ex = [math.exp(s - top) for s in scores]
                z = sum(ex)
                for j in range(n):
                    pij = ex[j] / z
                    for e in range(dh):
                        attn[i][head * dh + e] += pij * v[j][head * dh + e]
        out = [matvec(g("wo"), a, g("bo")) for a in attn]
        h = [layer_norm([x + o for x, o in zip(hx, ox)], g("ln1.weight"), g("ln1.bias"), mode, eps)
             for hx, ox in zip(h, out)]
        ff = [matvec(g("w2"), [max(v, 0.0) for v in matvec(g("w1"), x, g("b1"))], g("b2")) for x in h]
        h = [layer_norm([x + f for x, f in zip(hx, fx)], g("ln2.weight"), g("ln2.bias"), mode, eps)
             for hx, fx in zip(h, ff)]
    pooled = [sum(col) / n for col in zip(*h)]
    return matvec(t["head.weight"], pooled, t["head.bias"])


def crosscheck(data_dir, tol=1e-9):
    data_dir = Path(data_dir)
    hyper, tensors = load(data_dir / "fixture42")
    golden = json.loads((data_dir / "golden42.json").read_text())
    worst = 0.0
    for case in golden["cases"]:
        ref = forward(hyper, tensors, case["token_ids"])
        worst = max(worst, max(abs(a - b) for a, b in zip(ref, case["logits"])))
    return worst, worst <= tol


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default=Path(__file__).resolve().parents[1] / "tests" / "data")
    args = ap.parse_args()
    worst, ok = crosscheck(args.data)
    print(f"max |logit difference| = {worst:.3e} -> {'OK' if ok else 'MISMATCH'}")
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
