import numpy as np
import pytest

from certiformer.errors import ShapeError, UnsupportedShape
from certiformer.model import forward_eval
from certiformer.program import Program, attention_subprogram, compile_model
from conftest import make_model


def test_single_attention_block():
    prog = compile_model(make_model(0, heads=1), 5)
    assert prog.op_counts()["attention"] == 1


def test_layernorm_ops_present_only_for_standard():
    std = compile_model(make_model(0, ln="standard"), 4).op_counts()
    mod = compile_model(make_model(0, ln="modified"), 4).op_counts()
    assert std["square"] > 0 and std["sqrt"] > 0
    assert mod["square"] == 0 and mod["sqrt"] == 0


@pytest.mark.parametrize("seed,layers,heads,ln", [(0, 1, 1, "modified"), (1, 2, 2, "standard"),
                                                 (2, 3, 4, "none"), (3, 2, 4, "modified")])
def test_program_matches_reference(seed, layers, heads, ln):
    m = make_model(seed, layers=layers, heads=heads, ln=ln, classes=3)
    rng = np.random.default_rng(seed)
    for n in (1, 4, 7):
        ids = rng.integers(0, 64, size=n)
        x0 = m.embeddings(ids)
        logits = forward_eval(m, ids)
        prog = compile_model(m, n)
        out = prog.evaluate(x0)[prog.output].reshape(-1)
        assert np.abs(out - logits).max() < 1e-10
        label = int(np.argmax(logits))
        marg = compile_model(m, n, label)
        mv = marg.evaluate(x0)[marg.output].reshape(-1)
        expect = logits[label] - np.delete(logits, label)
        assert np.abs(mv - expect).max() < 1e-10
        # expanded attention evaluates identically
        ex = prog.expand_attention()
        assert ex.op_counts()["attention"] == 0
        assert np.abs(ex.evaluate(x0)[ex.output].reshape(-1) - logits).max() < 1e-10


def test_batched_evaluate():
    m = make_model(7)
    prog = compile_model(m, 3)
    xs = np.stack([m.embeddings([1, 2, 3]), m.embeddings([4, 5, 6])])
    out = prog.evaluate(xs)[prog.output]
    assert out.shape[0] == 2
    assert np.allclose(out[1].reshape(-1), forward_eval(m, [4, 5, 6]))


def test_attention_subprogram_softmax_rows():
    sub = attention_subprogram(4, 2, 3)
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(4, 6)) for _ in range(3))
    ids = sub.input_ids()
    vals = sub.evaluate({ids[0]: q, ids[1]: k, ids[2]: v})
    probs = next(vals[i] for i, nd in enumerate(sub.nodes) if nd.name == "probs")
    assert np.allclose(probs.sum(-1), 1.0)


def test_locality_flags():
    prog = compile_model(make_model(0), 4)
    names = {nd.name: nd for nd in prog.nodes}
    assert names["layer0.q"].local and names["layer0.attn"].local
    assert not names["pool"].local
    sub = attention_subprogram(3, 1, 2)
    scores = next(nd for nd in sub.nodes if nd.name == "scores")
    assert not scores.local


def test_construction_errors():
    p = Program()
    x = p.add("input", (), (2, 3))
    with pytest.raises(ShapeError):
        p.affine(x, np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        p.add("affine", (5,), (2, 3))
    with pytest.raises(UnsupportedShape):
        p.unary(x, "cube")
    with pytest.raises(ShapeError):
        p.reshape(x, (4, 2))
    with pytest.raises(UnsupportedShape):
        compile_model(make_model(0), 40)
