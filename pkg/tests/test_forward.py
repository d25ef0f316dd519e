import numpy as np
import pytest

from certiformer.bounds import IntervalBounds, PerturbationSpec, concretize
from certiformer.engine import propagate, program_for
from certiformer.forward import (
    ForwardBounds,
    OmegaCounter,
    bilinear_relaxation,
    forward_affine,
    forward_attention_block,
    forward_bilinear,
    forward_softmax,
    forward_unary,
    input_forward,
    to_forward_frame,
    unary_relaxation,
)
from certiformer.model import forward_eval
from certiformer.program import Program, attention_subprogram
from certiformer.sampling import apply, sample_perturbations
from conftest import make_model


def _random_fb(rng, rows, T, width=0.1):
    lo = rng.normal(size=rows + (T,))
    tl = rng.normal(size=rows)
    return ForwardBounds(lo, tl, lo.copy(), tl + width)


def test_input_forward_layout():
    x0 = np.arange(12.0).reshape(3, 4)
    fb = input_forward(x0, PerturbationSpec(2, 0.1, (2,)))
    assert fb.ref_dims == 4
    assert np.array_equal(fb.omega_l[1], np.eye(4)) and np.all(fb.omega_l[0] == 0)
    lo, hi = fb.evaluate(x0[1])
    assert np.array_equal(lo, x0) and np.array_equal(hi, x0)
    fb2 = input_forward(x0, PerturbationSpec(2, 0.1, (1, 3)))
    blocks = fb2.blocks(2)
    assert np.array_equal(blocks[0][0][0], np.eye(4)) and np.array_equal(blocks[1][0][2], np.eye(4))
    assert np.all(blocks[0][0][2] == 0)


def test_forward_frame_repack_is_exact():
    rng = np.random.default_rng(0)
    fb = _random_fb(rng, (2, 3), 5)
    ref = rng.normal(size=5)
    again = to_forward_frame(fb)
    assert all(np.array_equal(a, b) for a, b in zip(fb.evaluate(ref), again.evaluate(ref)))
    rebuilt = ForwardBounds.from_blocks(fb.blocks(1), fb.theta_l, fb.theta_u)
    assert np.array_equal(rebuilt.omega_u, fb.omega_u)


def test_affine_identity():
    rng = np.random.default_rng(1)
    fb = _random_fb(rng, (2, 3), 4)
    out = forward_affine(fb, np.eye(3))
    assert np.array_equal(out.omega_l, fb.omega_l) and np.array_equal(out.theta_u, fb.theta_u)


def test_unary_identity():
    rng = np.random.default_rng(2)
    fb = _random_fb(rng, (3,), 4)
    one, zero = np.ones(3), np.zeros(3)
    out = forward_unary(fb, (one, zero, one, zero))
    assert np.array_equal(out.omega_l, fb.omega_l) and np.array_equal(out.theta_u, fb.theta_u)


def _box_fb(l, u):
    """1-d bounds over a 1-d reference x_r in [-1, 1] tracing [l, u] exactly."""
    c, r = 0.5 * (l + u), 0.5 * (u - l)
    return ForwardBounds(np.array([[r]]), np.array([c]), np.array([[r]]), np.array([c]))


def test_bilinear_constant_operand():
    spec = PerturbationSpec(np.inf, 1.0, (1,))
    x0 = np.zeros((1, 1))
    a = _box_fb(-1.0, 3.0)
    b = _box_fb(2.0, 2.0)
    rel = bilinear_relaxation("i,i->i", IntervalBounds(np.array([-1.0]), np.array([3.0])),
                              IntervalBounds(np.array([2.0]), np.array([2.0])))
    out = forward_bilinear(a, b, "i,i->i", rel)
    iv = concretize(out, spec, x0)
    assert iv.lower[0] == pytest.approx(-2.0) and iv.upper[0] == pytest.approx(6.0)


def test_bilinear_score_contains_exact_range():
    spec = PerturbationSpec(np.inf, 1.0, (1,))
    x0 = np.zeros((1, 2))
    q = ForwardBounds(np.array([[1.0, 0.0]]), np.array([0.5]), np.array([[1.0, 0.0]]), np.array([0.5]))
    k = ForwardBounds(np.array([[0.0, 2.0]]), np.array([-1.0]), np.array([[0.0, 2.0]]), np.array([-1.0]))
    ivq = IntervalBounds(np.array([-0.5]), np.array([1.5]))
    ivk = IntervalBounds(np.array([-3.0]), np.array([1.0]))
    out = forward_bilinear(q, k, "e,e->", bilinear_relaxation("e,e->", ivq, ivk))
    iv = concretize(out, spec, x0)
    g = np.linspace(-1, 1, 201)
    A, B = np.meshgrid(g, g)
    exact = (A + 0.5) * (2 * B - 1.0)
    assert iv.lower <= exact.min() + 1e-12 and exact.max() <= iv.upper + 1e-12


def test_bilinear_same_operand_sound():
    spec = PerturbationSpec(np.inf, 1.0, (1,))
    x0 = np.zeros((1, 1))
    q = _box_fb(-0.5, 1.5)
    iv = IntervalBounds(np.array([-0.5]), np.array([1.5]))
    out = forward_bilinear(q, q, "i,i->i", bilinear_relaxation("i,i->i", iv, iv))
    xs = np.linspace(-1, 1, 1001)
    lo, hi = out.evaluate(xs[:, None])
    vals = (0.5 + xs) ** 2
    assert np.all(lo[:, 0] <= vals + 1e-12) and np.all(vals <= hi[:, 0] + 1e-12)


def test_exp_lower_positive_and_reciprocal_sound():
    rng = np.random.default_rng(3)
    spec = PerturbationSpec(2, 0.3, (1,))
    x0 = rng.normal(size=(1, 3))
    W = rng.normal(size=(4, 3))
    fb = forward_affine(input_forward(x0, spec), W)
    iv = concretize(fb, spec, x0)
    e = forward_unary(fb, unary_relaxation("exp", iv))
    assert np.all(concretize(e, spec, x0).lower > 0)
    # reciprocal of exp: negative slope must swap sides
    e_iv = IntervalBounds(np.exp(iv.lower), np.exp(iv.upper))
    r = forward_unary(e, unary_relaxation("reciprocal", e_iv))
    xs = x0[0] + sample_perturbations(rng, spec, 3, 2000)[:, 0]
    lo, hi = r.evaluate(xs)
    vals = np.exp(-(xs @ W.T))
    assert np.all(lo[:, 0] <= vals + 1e-9) and np.all(vals <= hi[:, 0] + 1e-9)


def _score_bounds(rng, n, eps):
    spec = PerturbationSpec(2, eps, (1,))
    x0 = rng.normal(size=(n, 3))
    W = rng.normal(size=(1, 3))
    fb = forward_affine(input_forward(x0, spec), W)  # (n, 1)
    scores = ForwardBounds(fb.omega_l.reshape(1, n, -1), fb.theta_l.reshape(1, n),
                           fb.omega_u.reshape(1, n, -1), fb.theta_u.reshape(1, n))
    return spec, x0, W, scores, concretize(scores, spec, x0)


def test_softmax_single_key():
    rng = np.random.default_rng(4)
    spec, x0, _, scores, iv = _score_bounds(rng, 1, 0.5)
    _, p_iv = forward_softmax(scores, iv, spec, x0)
    assert np.allclose(p_iv.lower, 1.0, atol=1e-9) and np.allclose(p_iv.upper, 1.0, atol=1e-9)


def test_softmax_zero_radius_and_containment():
    rng = np.random.default_rng(5)
    spec, x0, W, scores, iv = _score_bounds(rng, 4, 0.0)
    _, p_iv = forward_softmax(scores, iv, spec, x0)
    assert np.all(p_iv.width < 1e-9)
    spec, x0, W, scores, iv = _score_bounds(rng, 4, 0.4)
    _, p_iv = forward_softmax(scores, iv, spec, x0)
    lo, hi = np.maximum(p_iv.lower, 0), np.minimum(p_iv.upper, 1)
    assert np.all(lo <= hi)
    for delta in sample_perturbations(rng, spec, 3, 500)[:, 0]:
        s = (x0 + np.eye(4)[0][:, None] * delta) @ W.T
        p = np.exp(s[:, 0] - s[:, 0].max())
        p /= p.sum()
        assert np.all(p >= lo[0] - 1e-9) and np.all(p <= hi[0] + 1e-9)


def _qkv_bounds(m, ids, spec):
    x0 = m.embeddings(ids)
    prog = program_for(m, len(ids), None, "bf")
    res = propagate(prog, x0, spec, "bf", all_nodes=True)
    att = next(i for i, nd in enumerate(prog.nodes) if nd.op == "attention")
    parents = prog[att].parents
    return prog, res, att, parents, x0


def test_zero_values_give_exact_bias():
    m = make_model(0)
    L = m.layers[0]
    from dataclasses import replace
    m = replace(m, layers=[replace(L, wv=np.zeros_like(L.wv), bv=np.zeros_like(L.bv))])
    spec = PerturbationSpec(2, 0.1, (1,))
    prog, res, att, _, _ = _qkv_bounds(m, [1, 2, 3], spec)
    assert np.all(res.intervals[att].lower == 0) and np.all(res.intervals[att].upper == 0)
    out = next(i for i, nd in enumerate(prog.nodes) if nd.name == "layer0.out")
    assert np.allclose(res.intervals[out].lower, L.bo) and np.allclose(res.intervals[out].upper, L.bo)


def test_head_order_matches_reference():
    m = make_model(1, heads=2)
    ids = [4, 5, 6]
    spec = PerturbationSpec(2, 0.0, (1,))
    prog, res, att, _, x0 = _qkv_bounds(m, ids, spec)
    _, acts = forward_eval(m, ids, return_activations=True)
    assert np.allclose(res.intervals[att].lower, acts["layer0.attn"], atol=1e-9)
    assert np.allclose(res.intervals[att].upper, acts["layer0.attn"], atol=1e-9)


def test_attention_outputs_contain_samples():
    for seed in range(20):
        m = make_model(seed, heads=1 + seed % 2)
        rng = np.random.default_rng(seed)
        ids = rng.integers(0, 64, size=4)
        spec = PerturbationSpec([1, 2, np.inf][seed % 3], 0.05, (1 + seed % 4,))
        prog, res, att, _, x0 = _qkv_bounds(m, ids, spec)
        deltas = sample_perturbations(rng, spec, 8, 1000)
        vals = prog.evaluate(apply(x0, spec, deltas))[att]
        assert np.all(res.intervals[att].contains(vals, 1e-9)), seed


def test_attention_block_requires_three_inputs():
    sub = attention_subprogram(2, 1, 2)
    with pytest.raises(Exception):
        forward_attention_block(sub, [], [], PerturbationSpec(2, 0.1, (1,)), np.zeros((2, 2)))


def _mlp(seed):
    rng = np.random.default_rng(seed)
    p = Program()
    x = p.add("input", (), (1, 4))
    h = p.unary(p.affine(x, rng.normal(size=(8, 4)), rng.normal(size=8)), "relu")
    h = p.unary(p.affine(h, rng.normal(size=(8, 8)) / 3, rng.normal(size=8)), "relu")
    p.output = p.affine(h, rng.normal(size=(3, 8)), rng.normal(size=3))
    return p


def test_fully_forward_looser_than_backward():
    looser = total = 0
    for seed in range(20):
        prog = _mlp(seed)
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=(1, 4))
        spec = PerturbationSpec(2, 0.3, (1,))
        ff = propagate(prog, x0, spec, "ff")
        bf = propagate(prog, x0, spec, "bf")
        looser += int(np.sum(ff.output.width >= bf.output.width - 1e-9))
        total += ff.output.width.size
        vals = prog.evaluate(apply(x0, spec, sample_perturbations(rng, spec, 4, 2000)))
        for i in range(len(prog)):
            assert np.all(ff.intervals[i].contains(vals[i], 1e-9))
    assert looser / total >= 0.95


def test_omega_counter():
    c = OmegaCounter()
    c.add(ForwardBounds(np.zeros((2, 3, 4)), np.zeros((2, 3)), np.zeros((2, 3, 4)), np.zeros((2, 3))))
    assert c.entries == 24
