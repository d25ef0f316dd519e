"""Regenerate the committed seed-42 fixture and its golden logits under tests/data."""
import argparse
import json
from pathlib import Path

from certiformer.io import generate_fixture, weights_checksum
from certiformer.model import Hyper, forward_eval

GOLDEN_INPUTS = [
    [15, 14, 1],
    [0],
    [3, 9, 27, 41, 5, 63],
    list(range(1, 17)),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=Path(__file__).resolve().parents[1] / "tests" / "data")
    args = ap.parse_args()
    out = Path(args.out)
    hyper = Hyper(num_layers=1, num_heads=2, d_model=8, d_ff=16, max_len=32, vocab_size=64, num_classes=2)
    model, _ = generate_fixture(42, hyper, out / "fixture42")
    golden = {
        "seed": 42,
        "sha256": weights_checksum(out / "fixture42"),
        "cases": [{"token_ids": ids, "logits": [float(v) for v in forward_eval(model, ids)]}
                  for ids in GOLDEN_INPUTS],
    }
    (out / "golden42.json").write_text(json.dumps(golden, indent=2) + "\n")
    print(golden["sha256"])


if __name__ == "__main__":
    main()
