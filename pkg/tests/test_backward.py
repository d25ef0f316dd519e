import numpy as np
import pytest

from certiformer.backward import (
    BackwardState,
    LambdaCounter,
    backprop_affine,
    backprop_through_attention_output,
    backprop_unary,
    backward_bounds,
    init_identity,
    substitute_terminal,
)
from certiformer.bounds import LinearBounds, PerturbationSpec, concretize, ibp_affine, input_box
from certiformer.engine import propagate, program_for
from certiformer.errors import ShapeError
from certiformer.forward import input_forward
from certiformer.model import forward_eval
from certiformer.program import Program, ibp_node
from certiformer.relaxations import relax_unary
from certiformer.sampling import apply, margins, sample_perturbations
from conftest import make_model


def test_identity_init():
    st = init_identity((3,))
    assert np.array_equal(st.A_L, np.eye(3)) and np.array_equal(st.bias_U, np.zeros(3))
    v = np.array([0.3, -1.0, 2.0])
    lo, hi = st.evaluate(v)
    assert np.array_equal(lo, v) and np.array_equal(hi, v)
    diag = init_identity((2, 3), diag=True)
    assert diag.A_L.shape == (3, 2, 3)
    lo, _ = diag.evaluate(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(lo, np.arange(6.0).reshape(2, 3).T)


def test_affine_identity_and_zero():
    st = init_identity((3,))
    same = backprop_affine(st, np.eye(3), np.zeros(3))
    assert np.array_equal(same.A_L, st.A_L) and np.array_equal(same.bias_L, st.bias_L)
    z = backprop_affine(st, np.zeros((3, 3)))
    back = backprop_affine(z, np.eye(3))
    assert np.array_equal(back.A_L, np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        backprop_affine(st, np.eye(4))


def test_two_affines_compose():
    rng = np.random.default_rng(0)
    W1, b1, W2, b2 = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(2, 4)), rng.normal(size=2)
    st = backprop_affine(backprop_affine(init_identity((2,)), W2, b2), W1, b1)
    assert np.allclose(st.A_L, W2 @ W1)
    assert np.allclose(st.bias_L, W2 @ b1 + b2)


def test_unary_identity_relaxation():
    st = init_identity((3,))
    rel = (np.ones(3), np.zeros(3), np.ones(3), np.zeros(3))
    out = backprop_unary(st, rel)
    assert np.array_equal(out.A_L, st.A_L) and np.array_equal(out.A_U, st.A_U)
    with pytest.raises(ShapeError):
        backprop_unary(st, None)


def test_relu_positive_region_is_affine():
    r = relax_unary("relu", np.full(3, 0.5), np.full(3, 2.0))
    W = np.random.default_rng(1).normal(size=(3, 3))
    st = backprop_affine(init_identity((3,)), W)
    out = backprop_unary(st, (r.alpha_l, r.beta_l, r.alpha_u, r.beta_u))
    assert np.array_equal(out.A_L, st.A_L) and np.array_equal(out.bias_U, st.bias_U)


def _mlp(seed, d=4, h=8):
    rng = np.random.default_rng(seed)
    p = Program()
    x = p.add("input", (), (1, d))
    a = p.affine(x, rng.normal(size=(h, d)), rng.normal(size=h))
    r = p.unary(a, "relu")
    p.output = p.affine(r, rng.normal(size=(3, h)), rng.normal(size=3))
    return p


def test_single_affine_matches_interval_image():
    rng = np.random.default_rng(2)
    p = Program()
    x = p.add("input", (), (1, 3))
    W, b = rng.normal(size=(4, 3)), rng.normal(size=4)
    p.output = p.affine(x, W, b)
    x0 = rng.normal(size=(1, 3))
    spec = PerturbationSpec(np.inf, 0.3, (1,))
    lb = backward_bounds(p, p.output, {x: input_forward(x0, spec)}, {})
    iv = concretize(lb, spec, x0)
    ref = ibp_affine(input_box(x0, spec), W, b)
    assert np.allclose(iv.lower, ref.lower) and np.allclose(iv.upper, ref.upper)


@pytest.mark.parametrize("seed", range(3))
def test_mlp_sound_and_tighter_than_ibp(seed):
    prog = _mlp(seed)
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(1, 4))
    spec = PerturbationSpec(2, 0.5, (1,))
    res = propagate(prog, x0, spec, "bf")
    ibp = propagate(prog, x0, spec, "ibp")
    deltas = sample_perturbations(rng, spec, 4, 10**5)
    vals = prog.evaluate(apply(x0, spec, deltas))[prog.output]
    assert np.all(res.output.contains(vals, 1e-9))
    tighter = res.output.width <= ibp.output.width + 1e-12
    assert tighter.mean() >= 0.95


def test_substitution_identity():
    rng = np.random.default_rng(3)
    term = LinearBounds(rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3)),
                        rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3)))
    st = init_identity((2, 3))
    out = backprop_through_attention_output(st, term)
    assert np.allclose(out.reshape(2, 3).lower_coeff, term.lower_coeff)
    assert np.allclose(out.reshape(2, 3).upper_bias, term.upper_bias)
    dst = init_identity((2, 3), diag=True)
    dout = backprop_through_attention_output(dst, term)
    assert np.allclose(dout.lower_coeff, term.lower_coeff) and np.allclose(dout.upper_bias, term.upper_bias)


def test_negative_coefficients_use_opposite_side():
    rng = np.random.default_rng(4)
    term = LinearBounds(rng.normal(size=(3, 5)), rng.normal(size=3), rng.normal(size=(3, 5)), rng.normal(size=3))
    A = -np.abs(rng.normal(size=(2, 3)))
    st = BackwardState(A, A.copy(), np.zeros(2), np.zeros(2))
    cL, cU, bL, bU = substitute_terminal(st, term)
    assert np.allclose(cL, A @ term.upper_coeff) and np.allclose(bL, A @ term.upper_bias)
    assert np.allclose(cU, A @ term.lower_coeff)


@pytest.mark.parametrize("seed", range(4))
def test_end_to_end_margin_contains_samples(seed):
    m = make_model(seed, heads=2)
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 64, size=5)
    x0 = m.embeddings(ids)
    label = int(np.argmax(forward_eval(m, ids)))
    spec = PerturbationSpec(2, 0.05, (2,))
    res = propagate(program_for(m, 5, label, "bf"), x0, spec, "bf")
    deltas = sample_perturbations(rng, spec, 8, 5000)
    marg = margins(m, apply(x0, spec, deltas), label)
    assert marg.min() >= res.output.lower.min() - 1e-9


def test_first_layer_interval_exact_linf():
    m = make_model(1)
    x0 = m.embeddings([1, 2, 3])
    spec = PerturbationSpec(np.inf, 0.1, (2,))
    prog = program_for(m, 3, 0, "bf")
    res = propagate(prog, x0, spec, "bf", all_nodes=True)
    emb = next(i for i, nd in enumerate(prog.nodes) if nd.name == "embed")
    h0 = x0 + m.pos_enc[:3]
    assert np.allclose(res.intervals[emb].lower[1], h0[1] - 0.1)
    assert np.allclose(res.intervals[emb].upper[1], h0[1] + 0.1)
    assert np.allclose(res.intervals[emb].lower[0], h0[0])


def test_residual_width_not_above_interval_sum():
    worse = 0
    for seed in range(20):
        m = make_model(seed)
        ids = np.random.default_rng(seed).integers(0, 64, size=4)
        label = int(np.argmax(forward_eval(m, ids)))
        prog = program_for(m, 4, label, "bf")
        res = propagate(prog, m.embeddings(ids), PerturbationSpec(2, 0.05, (1,)), "bf", all_nodes=True)
        for i, nd in enumerate(prog.nodes):
            if nd.op == "add":
                ref = ibp_node(nd, [res.intervals[p] for p in nd.parents])
                worse += int(np.any(res.intervals[i].width > ref.width + 1e-12))
    assert worse == 0


def _lambda_entries(method, n, seed=0):
    m = make_model(seed, heads=2)
    ids = list(range(1, n + 1))
    label = int(np.argmax(forward_eval(m, ids)))
    res = propagate(program_for(m, n, label, method), m.embeddings(ids), PerturbationSpec(2, 0.01, (1,)), method)
    return res.lambda_entries


def test_counter_scaling():
    bf = [_lambda_entries("bf", n) for n in (4, 8, 16)]
    fb = [_lambda_entries("fb", n) for n in (4, 8, 16)]
    assert all(b / a <= 2.2 for a, b in zip(bf, bf[1:]))
    assert all(b / a >= 3.5 for a, b in zip(fb, fb[1:]))


def test_counter_counts_entries():
    c = LambdaCounter()
    c.add(np.zeros((3, 4)))
    c.add(np.zeros(5))
    assert c.entries == 17 and c.steps == 2
