"""Forward propagation of linear bounds in the perturbed-input frame.

A :class:`ForwardBounds` keeps, for every neuron of a node, lower and upper
affine functions ``Omega . x_r + Theta`` of the concatenated perturbed
embeddings ``x_r``. The hybrid verifier uses these inside self-attention;
the fully-forward ablation uses them for every node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import IntervalBounds, LinearBounds, PerturbationSpec, concretize, ibp_bilinear
from .errors import DomainViolation, ShapeError, UnsupportedShape
from .program import Program, split_spec, ibp_node
from .relaxations import UNARY_PARAMS, bound_multiply


def _pos(a):
    return np.maximum(a, 0.0)


def _neg(a):
    return np.minimum(a, 0.0)


@dataclass(frozen=True)
class ForwardBounds(LinearBounds):
    """Input-frame linear bounds whose rows follow a node's shape."""

    @property
    def omega_l(self) -> np.ndarray:
        return self.lower_coeff

    @property
    def omega_u(self) -> np.ndarray:
        return self.upper_coeff

    @property
    def theta_l(self) -> np.ndarray:
        return self.lower_bias

    @property
    def theta_u(self) -> np.ndarray:
        return self.upper_bias

    def blocks(self, t: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-perturbed-position coefficient blocks, in position order."""
        if self.ref_dims % t:
            raise ShapeError(f"reference width {self.ref_dims} not divisible into {t} blocks")
        w = self.ref_dims // t
        return [(self.omega_l[..., k * w:(k + 1) * w], self.omega_u[..., k * w:(k + 1) * w])
                for k in range(t)]

    @staticmethod
    def from_blocks(blocks, theta_l, theta_u) -> "ForwardBounds":
        lo = np.concatenate([b[0] for b in blocks], axis=-1)
        hi = np.concatenate([b[1] for b in blocks], axis=-1)
        return ForwardBounds(lo, theta_l, hi, theta_u)


def to_forward_frame(lb: LinearBounds) -> ForwardBounds:
    """Repackage input-frame backward bounds as forward bounds (no arithmetic)."""
    if lb.frame != "input":
        raise ShapeError(f"expected input-frame bounds, got {lb.frame!r}")
    return ForwardBounds(lb.lower_coeff, lb.lower_bias, lb.upper_coeff, lb.upper_bias)


def input_forward(x0: np.ndarray, spec: PerturbationSpec) -> ForwardBounds:
    """Exact bounds of the embeddings: selection of x_r plus constant rows."""
    x0 = np.asarray(x0, dtype=np.float64)
    spec.validate(x0.shape[0])
    n, d = x0.shape
    T = spec.t * d
    omega = np.zeros((n, d, T))
    theta = x0.copy()
    for k, i in enumerate(spec.index):
        omega[i, :, k * d:(k + 1) * d] = np.eye(d)
        theta[i] = 0.0
    return ForwardBounds(omega, theta, omega.copy(), theta.copy())


def forward_affine(fb: ForwardBounds, W: np.ndarray, b=None) -> ForwardBounds:
    Wp, Wn = _pos(W), _neg(W)
    lo = np.einsum("...iT,oi->...oT", fb.omega_l, Wp) + np.einsum("...iT,oi->...oT", fb.omega_u, Wn)
    hi = np.einsum("...iT,oi->...oT", fb.omega_u, Wp) + np.einsum("...iT,oi->...oT", fb.omega_l, Wn)
    tl = fb.theta_l @ Wp.T + fb.theta_u @ Wn.T
    tu = fb.theta_u @ Wp.T + fb.theta_l @ Wn.T
    if b is not None:
        tl = tl + b
        tu = tu + b
    return ForwardBounds(lo, tl, hi, tu)


def forward_add(a: ForwardBounds, b: ForwardBounds) -> ForwardBounds:
    return ForwardBounds(a.omega_l + b.omega_l, a.theta_l + b.theta_l,
                         a.omega_u + b.omega_u, a.theta_u + b.theta_u)


def forward_unary(fb: ForwardBounds, relax) -> ForwardBounds:
    """Compose per-neuron lines with the operand bounds; negative slopes swap sides."""
    aL, bL, aU, bU = (np.asarray(v, dtype=np.float64) for v in relax)
    lo = _pos(aL)[..., None] * fb.omega_l + _neg(aL)[..., None] * fb.omega_u
    hi = _pos(aU)[..., None] * fb.omega_u + _neg(aU)[..., None] * fb.omega_l
    tl = _pos(aL) * fb.theta_l + _neg(aL) * fb.theta_u + bL
    tu = _pos(aU) * fb.theta_u + _neg(aU) * fb.theta_l + bU
    return ForwardBounds(lo, tl, hi, tu)


def forward_bilinear(fx: ForwardBounds, fy: ForwardBounds, spec: str, relax) -> ForwardBounds:
    """Bounds of ``einsum(spec, x, y)`` from per-term planes.

    Each product term ``x_a * y_b`` is replaced by its plane with the operand
    bounds chosen by the sign of the plane coefficient, then terms are summed.
    """
    xi, yi, zi = split_spec(spec)
    union = "".join(dict.fromkeys(xi + yi))
    aL, bL, gL, aU, bU, gU = relax

    def om(P, O, idx):
        return np.einsum(f"{union},{idx}T->{zi}T", P, O)

    def th(P, t, idx):
        return np.einsum(f"{union},{idx}->{zi}", P, t)

    lo = (om(_pos(aL), fx.omega_l, xi) + om(_neg(aL), fx.omega_u, xi)
          + om(_pos(bL), fy.omega_l, yi) + om(_neg(bL), fy.omega_u, yi))
    hi = (om(_pos(aU), fx.omega_u, xi) + om(_neg(aU), fx.omega_l, xi)
          + om(_pos(bU), fy.omega_u, yi) + om(_neg(bU), fy.omega_l, yi))
    tl = (th(_pos(aL), fx.theta_l, xi) + th(_neg(aL), fx.theta_u, xi)
          + th(_pos(bL), fy.theta_l, yi) + th(_neg(bL), fy.theta_u, yi)
          + np.einsum(f"{union}->{zi}", gL))
    tu = (th(_pos(aU), fx.theta_u, xi) + th(_neg(aU), fx.theta_l, xi)
          + th(_pos(bU), fy.theta_u, yi) + th(_neg(bU), fy.theta_l, yi)
          + np.einsum(f"{union}->{zi}", gU))
    return ForwardBounds(lo, tl, hi, tu)


def forward_reshape(fb: ForwardBounds, shape) -> ForwardBounds:
    T = fb.ref_dims
    return ForwardBounds(fb.omega_l.reshape(tuple(shape) + (T,)), fb.theta_l.reshape(shape),
                         fb.omega_u.reshape(tuple(shape) + (T,)), fb.theta_u.reshape(shape))


def forward_pool(fb: ForwardBounds) -> ForwardBounds:
    return ForwardBounds(fb.omega_l.mean(axis=0, keepdims=True), fb.theta_l.mean(axis=0, keepdims=True),
                         fb.omega_u.mean(axis=0, keepdims=True), fb.theta_u.mean(axis=0, keepdims=True))


# ---------------------------------------------------------------- relaxation helpers


def _broadcast_to_union(arr, idx, union, sizes):
    shape = tuple(sizes[c] for c in union)
    # insert singleton axes for labels the operand lacks, then broadcast
    perm = [idx.index(c) for c in union if c in idx]
    arr = np.transpose(arr, perm)
    expand = tuple(slice(None) if c in idx else None for c in union)
    return np.broadcast_to(arr[expand], shape)


def bilinear_relaxation(spec: str, ivx: IntervalBounds, ivy: IntervalBounds):
    """Plane parameters over the union index space of ``spec``."""
    xi, yi, _ = split_spec(spec)
    union = "".join(dict.fromkeys(xi + yi))
    sizes = dict(zip(xi, ivx.shape))
    sizes.update(zip(yi, ivy.shape))
    lx = _broadcast_to_union(ivx.lower, xi, union, sizes)
    ux = _broadcast_to_union(ivx.upper, xi, union, sizes)
    ly = _broadcast_to_union(ivy.lower, yi, union, sizes)
    uy = _broadcast_to_union(ivy.upper, yi, union, sizes)
    r = bound_multiply(lx, ux, ly, uy)
    return tuple(np.asarray(v) for v in (r.alpha_l, r.beta_l, r.gamma_l, r.alpha_u, r.beta_u, r.gamma_u))


def unary_relaxation(kind: str, iv: IntervalBounds):
    return UNARY_PARAMS[kind](iv.lower, iv.upper)


def concretize_forward(fb: ForwardBounds, spec: PerturbationSpec, x0) -> IntervalBounds:
    return concretize(fb, spec, x0)


# ---------------------------------------------------------------- node-level driver


class OmegaCounter:
    def __init__(self):
        self.entries = 0

    def add(self, fb: ForwardBounds) -> None:
        self.entries += int(fb.omega_l.size)


def fully_forward_sublayer(node, parents: list[ForwardBounds], parent_ivs: list[IntervalBounds],
                           relax=None) -> ForwardBounds:
    """Forward rule for one primitive node (no attention nodes here)."""
    op = node.op
    if op == "affine":
        return forward_affine(parents[0], node.params["W"], node.params["b"])
    if op == "add":
        return forward_add(parents[0], parents[1])
    if op == "unary":
        if relax is None:
            relax = unary_relaxation(node.params["kind"], parent_ivs[0])
        return forward_unary(parents[0], relax)
    if op == "bilinear":
        if relax is None:
            relax = bilinear_relaxation(node.params["spec"], parent_ivs[0], parent_ivs[1])
        return forward_bilinear(parents[0], parents[1], node.params["spec"], relax)
    if op == "reshape":
        return forward_reshape(parents[0], node.shape)
    if op == "pool":
        return forward_pool(parents[0])
    raise UnsupportedShape(f"no forward rule for op {op!r}")


def forward_program(sub: Program, inputs: dict[int, ForwardBounds], input_ivs: dict[int, IntervalBounds],
                    spec: PerturbationSpec, x0, counter: OmegaCounter | None = None):
    """Forward-propagate through every node of ``sub``.

    Each node's interval is the one-step interval image of its parents'
    intervals intersected with the concretized forward bounds. Returns the
    per-node forward bounds and intervals.
    """
    fbs: dict[int, ForwardBounds] = dict(inputs)
    ivs: dict[int, IntervalBounds] = dict(input_ivs)
    for j, node in enumerate(sub.nodes):
        if node.op == "input":
            continue
        p_ivs = [ivs[p] for p in node.parents]
        if node.op == "attention":
            fb, inner = forward_attention_block(node.params["sub"], [fbs[p] for p in node.parents],
                                                p_ivs, spec, x0, counter)
            fbs[j], ivs[j] = fb, inner
            continue
        fb = fully_forward_sublayer(node, [fbs[p] for p in node.parents], p_ivs)
        if counter is not None:
            counter.add(fb)
        step = ibp_node(node, p_ivs)
        ivs[j] = step.intersect(concretize(fb, spec, x0))
        fbs[j] = fb
    return fbs, ivs


def forward_softmax(scores: ForwardBounds, score_iv: IntervalBounds, spec: PerturbationSpec, x0):
    """Bounds of softmax over the last axis of ``scores`` via exp, sum, 1/x and a product.

    Returns ``(probs_bounds, probs_interval)``.
    """
    shape = scores.rows
    m = shape[-1]
    if m == 1:
        ones = np.ones(shape)
        zeros = np.zeros(scores.omega_l.shape)
        return ForwardBounds(zeros, ones, zeros.copy(), ones.copy()), IntervalBounds(ones, ones.copy())
    e_iv = IntervalBounds(np.exp(score_iv.lower), np.exp(score_iv.upper))
    e_fb = forward_unary(scores, unary_relaxation("exp", score_iv))
    e_iv = e_iv.intersect(concretize(e_fb, spec, x0))
    ones = np.ones((1, m))
    z_fb = forward_affine(e_fb, ones)
    z_iv = IntervalBounds(e_iv.lower.sum(-1, keepdims=True), e_iv.upper.sum(-1, keepdims=True))
    z_iv = z_iv.intersect(concretize(z_fb, spec, x0))
    if np.any(z_iv.lower <= 0):
        raise DomainViolation("softmax denominator lower bound is not positive")
    r_fb = forward_unary(z_fb, unary_relaxation("reciprocal", z_iv))
    r_iv = IntervalBounds(1.0 / z_iv.upper, 1.0 / z_iv.lower).intersect(concretize(r_fb, spec, x0))
    labels = "abcdefgh"[: len(shape)]
    pspec = f"{labels},{labels[:-1]}z->{labels}"
    relax = bilinear_relaxation(pspec, e_iv, r_iv)
    p_fb = forward_bilinear(e_fb, r_fb, pspec, relax)
    p_iv = ibp_bilinear(e_iv, r_iv, pspec).intersect(concretize(p_fb, spec, x0))
    p_iv = p_iv.intersect(IntervalBounds(np.zeros(shape), np.ones(shape)))
    return p_fb, p_iv


def forward_attention_block(sub: Program, qkv: list[ForwardBounds], qkv_ivs: list[IntervalBounds],
                            spec: PerturbationSpec, x0, counter: OmegaCounter | None = None):
    """Forward bounds of a multi-head attention output given q/k/v bounds.

    Runs the primitive attention graph (scores, exp, sum, reciprocal,
    probabilities, weighted values, head concatenation) in the input frame.
    """
    ids = sub.input_ids()
    if len(qkv) != len(ids):
        raise ShapeError("attention needs query, key and value bounds")
    fbs, ivs = forward_program(sub, dict(zip(ids, qkv)), dict(zip(ids, qkv_ivs)), spec, x0, counter)
    return fbs[sub.output], ivs[sub.output]
