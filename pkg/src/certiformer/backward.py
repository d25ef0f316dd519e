"""Backward propagation of linear bounds through a program.

Coefficient tensors have shape ``(R, *node_shape)``. Two layouts exist:

* dense: ``R`` enumerates every target neuron and the coefficient covers all
  positions of the current node (cross-position blocks are materialised);
* diagonal: ``R`` enumerates the target features of a single position and
  ``A[o, i, ...]`` is the block linking target position ``i`` to position ``i``
  of the current node. Only usable while no op mixes positions.

Propagation stops at *terminal* nodes whose bounds are already known as
linear functions of the perturbed input (the input itself and, in the hybrid
scheme, attention outputs), where the known bounds are substituted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import LinearBounds, PerturbationSpec, IntervalBounds, concretize
from .errors import ShapeError, UnsupportedShape
from .program import Program, split_spec


def _pos(a):
    return np.maximum(a, 0.0)


def _neg(a):
    return np.minimum(a, 0.0)


@dataclass
class BackwardState:
    """Linear bounds of target rows as functions of one node's neurons."""

    A_L: np.ndarray
    A_U: np.ndarray
    bias_L: np.ndarray
    bias_U: np.ndarray
    diag: bool = False

    @property
    def rows(self) -> int:
        return self.A_L.shape[0]

    def reduce(self, contrib: np.ndarray) -> np.ndarray:
        """Sum a per-neuron contribution ``(R, *shape)`` into the bias layout."""
        axes = tuple(range(2 if self.diag else 1, contrib.ndim))
        return contrib.sum(axis=axes) if axes else contrib

    def evaluate(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bounds evaluated at node values (single sample, shape ``node_shape``)."""
        if self.diag:
            R, n = self.A_L.shape[:2]
            flat = values.reshape(n, -1)
            lo = np.einsum("rif,if->ri", self.A_L.reshape(R, n, -1), flat)
            hi = np.einsum("rif,if->ri", self.A_U.reshape(R, n, -1), flat)
        else:
            lo = self.A_L.reshape(self.rows, -1) @ values.reshape(-1)
            hi = self.A_U.reshape(self.rows, -1) @ values.reshape(-1)
        return lo + self.bias_L, hi + self.bias_U


def init_identity(shape: tuple[int, ...], diag: bool = False) -> BackwardState:
    """Bounds of a node by itself: identity coefficients, zero bias."""
    shape = tuple(shape)
    if diag:
        n, feat = shape[0], shape[1:]
        o = int(np.prod(feat))
        eye = np.eye(o).reshape((o,) + feat)
        A = np.ascontiguousarray(np.broadcast_to(eye[:, None], (o, n) + feat))
        bias = np.zeros((o, n))
    else:
        r = int(np.prod(shape))
        A = np.eye(r).reshape((r,) + shape)
        bias = np.zeros(r)
    return BackwardState(A, A.copy(), bias, bias.copy(), diag)


def backprop_affine(state: BackwardState, W: np.ndarray, b=None) -> BackwardState:
    """Substitute ``y = x W^T + b`` (last axis)."""
    if state.A_L.shape[-1] != W.shape[0]:
        raise ShapeError(f"coefficient width {state.A_L.shape[-1]} does not match W {W.shape}")
    bias_L, bias_U = state.bias_L, state.bias_U
    if b is not None:
        bias_L = bias_L + state.reduce((state.A_L * b).sum(-1))
        bias_U = bias_U + state.reduce((state.A_U * b).sum(-1))
    return BackwardState(state.A_L @ W, state.A_U @ W, bias_L, bias_U, state.diag)


def backprop_unary(state: BackwardState, relax) -> BackwardState:
    """Sign-split substitution of per-neuron lines ``(aL, bL, aU, bU)``."""
    if relax is None:
        raise ShapeError("missing relaxation for unary node")
    aL, bL, aU, bU = relax
    pL, nL = _pos(state.A_L), _neg(state.A_L)
    pU, nU = _pos(state.A_U), _neg(state.A_U)
    A_L = pL * aL + nL * aU
    A_U = pU * aU + nU * aL
    bias_L = state.bias_L + state.reduce(pL * bL + nL * bU)
    bias_U = state.bias_U + state.reduce(pU * bU + nU * bL)
    return BackwardState(A_L, A_U, bias_L, bias_U, state.diag)


def backprop_bilinear(state: BackwardState, spec: str, relax):
    """Split a product node into coefficient tensors for both operands.

    ``relax`` holds the six plane parameter arrays over the union index space
    of ``spec``. Returns ``(x_state, y_coeffs, bias_L, bias_U)`` where the
    bias already includes the plane offsets.
    """
    xi, yi, zi = split_spec(spec)
    union = "".join(dict.fromkeys(xi + yi))
    keep = zi[0] if state.diag else ""
    aL, bL, gL, aU, bU, gU = relax
    pL, nL = _pos(state.A_L), _neg(state.A_L)
    pU, nU = _pos(state.A_U), _neg(state.A_U)

    def contract(A, P, out):
        return np.einsum(f"R{zi},{union}->R{out}", A, P)

    xL = contract(pL, aL, xi) + contract(nL, aU, xi)
    xU = contract(pU, aU, xi) + contract(nU, aL, xi)
    yL = contract(pL, bL, yi) + contract(nL, bU, yi)
    yU = contract(pU, bU, yi) + contract(nU, bL, yi)
    bias_L = state.bias_L + contract(pL, gL, keep) + contract(nL, gU, keep)
    bias_U = state.bias_U + contract(pU, gU, keep) + contract(nU, gL, keep)
    return (xL, xU), (yL, yU), bias_L, bias_U


def backprop_through_attention_output(state: BackwardState, attn: LinearBounds) -> LinearBounds:
    """Replace attention-output neurons by their input-frame bounds.

    ``attn`` has rows shaped like the attention output and coefficients over
    the concatenated perturbed embeddings. Positive coefficients take the
    matching side, negative ones the opposite side.
    """
    coef_L, coef_U, b_L, b_U = substitute_terminal(state, attn)
    if state.diag:
        return _diag_to_rows(coef_L, coef_U, b_L, b_U)
    return LinearBounds(coef_L, b_L, coef_U, b_U)


def substitute_terminal(state: BackwardState, term: LinearBounds):
    T = term.ref_dims
    if state.diag:
        R, n = state.A_L.shape[:2]
        OL = term.lower_coeff.reshape(n, -1, T)
        OU = term.upper_coeff.reshape(n, -1, T)
        TL = term.lower_bias.reshape(n, -1)
        TU = term.upper_bias.reshape(n, -1)
        AL = state.A_L.reshape(R, n, -1)
        AU = state.A_U.reshape(R, n, -1)
        pL, nL, pU, nU = _pos(AL), _neg(AL), _pos(AU), _neg(AU)
        cL = np.einsum("rif,ift->rit", pL, OL) + np.einsum("rif,ift->rit", nL, OU)
        cU = np.einsum("rif,ift->rit", pU, OU) + np.einsum("rif,ift->rit", nU, OL)
        bL = state.bias_L + np.einsum("rif,if->ri", pL, TL) + np.einsum("rif,if->ri", nL, TU)
        bU = state.bias_U + np.einsum("rif,if->ri", pU, TU) + np.einsum("rif,if->ri", nU, TL)
        return cL, cU, bL, bU
    R = state.rows
    AL = state.A_L.reshape(R, -1)
    AU = state.A_U.reshape(R, -1)
    if AL.shape[1] != term.lower_bias.size:
        raise ShapeError("terminal bounds do not match the coefficient layout")
    OL = term.lower_coeff.reshape(-1, T)
    OU = term.upper_coeff.reshape(-1, T)
    TL = term.lower_bias.reshape(-1)
    TU = term.upper_bias.reshape(-1)
    pL, nL, pU, nU = _pos(AL), _neg(AL), _pos(AU), _neg(AU)
    cL = pL @ OL + nL @ OU
    cU = pU @ OU + nU @ OL
    bL = state.bias_L + pL @ TL + nL @ TU
    bU = state.bias_U + pU @ TU + nU @ TL
    return cL, cU, bL, bU


def _diag_to_rows(cL, cU, bL, bU) -> LinearBounds:
    # (O, n, T) -> (n, O, T): row (i, o) is feature o of target position i
    return LinearBounds(
        np.ascontiguousarray(cL.transpose(1, 0, 2)), np.ascontiguousarray(bL.T),
        np.ascontiguousarray(cU.transpose(1, 0, 2)), np.ascontiguousarray(bU.T),
    )


class LambdaCounter:
    """Counts coefficient entries materialised during backward steps."""

    def __init__(self):
        self.entries = 0
        self.steps = 0

    def add(self, arr: np.ndarray) -> None:
        self.entries += int(arr.size)
        self.steps += 1


def _region(program: Program, target: int, terminals) -> list[int]:
    seen, stack = set(), [target]
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        if i in terminals and i != target:
            continue
        stack.extend(program[i].parents)
    return sorted(seen)


def backward_bounds(
    program: Program,
    target: int,
    terminals: dict[int, LinearBounds],
    relax: dict[int, tuple],
    counter: LambdaCounter | None = None,
) -> LinearBounds:
    """Linear bounds of ``target`` in the perturbed-input frame.

    Walks the DAG in reverse topological order, accumulating coefficients on
    each node (residual branches simply add up) and substituting terminal
    bounds wherever a terminal is reached.
    """
    node = program[target]
    if target in terminals:
        return terminals[target]
    region = _region(program, target, terminals)
    diag = all(program[i].local for i in region if i not in terminals or i == target)
    state0 = init_identity(node.shape, diag)
    pending: dict[int, list[np.ndarray]] = {target: [state0.A_L, state0.A_U]}
    bias_L, bias_U = state0.bias_L, state0.bias_U
    T = next(iter(terminals.values())).ref_dims
    rows = state0.rows
    n = node.shape[0]
    coef_L = np.zeros((rows, n, T) if diag else (rows, T))
    coef_U = coef_L.copy()

    def push(pid, AL, AU):
        if pid in pending:
            pending[pid][0] = pending[pid][0] + AL
            pending[pid][1] = pending[pid][1] + AU
        else:
            pending[pid] = [AL, AU]

    for i in reversed(region):
        if i not in pending:
            continue
        AL, AU = pending.pop(i)
        if counter is not None:
            counter.add(AL)
        st = BackwardState(AL, AU, np.zeros_like(bias_L), np.zeros_like(bias_U), diag)
        if i in terminals and i != target:
            cL, cU, bL, bU = substitute_terminal(st, terminals[i])
            coef_L += cL
            coef_U += cU
            bias_L = bias_L + bL
            bias_U = bias_U + bU
            continue
        nd = program[i]
        op = nd.op
        if op == "affine":
            out = backprop_affine(st, nd.params["W"], nd.params["b"])
            push(nd.parents[0], out.A_L, out.A_U)
        elif op == "unary":
            if i not in relax:
                raise ShapeError(f"no relaxation for unary node {nd.name or i}")
            out = backprop_unary(st, relax[i])
            push(nd.parents[0], out.A_L, out.A_U)
        elif op == "add":
            out = st
            push(nd.parents[0], AL, AU)
            push(nd.parents[1], AL, AU)
        elif op == "bilinear":
            if i not in relax:
                raise ShapeError(f"no relaxation for bilinear node {nd.name or i}")
            (xL, xU), (yL, yU), bL, bU = backprop_bilinear(st, nd.params["spec"], relax[i])
            push(nd.parents[0], xL, xU)
            push(nd.parents[1], yL, yU)
            out = BackwardState(AL, AU, bL, bU, diag)
        elif op == "reshape":
            shp = (AL.shape[0],) + program[nd.parents[0]].shape
            push(nd.parents[0], AL.reshape(shp), AU.reshape(shp))
            out = st
        elif op == "pool":
            if diag:
                raise UnsupportedShape("pooling cannot be traversed in diagonal layout")
            m = program[nd.parents[0]].shape[0]
            shp = (AL.shape[0],) + program[nd.parents[0]].shape
            push(nd.parents[0], np.broadcast_to(AL / m, shp), np.broadcast_to(AU / m, shp))
            out = st
        elif op == "input":
            raise ShapeError(f"input node {i} reached without terminal bounds")
        else:
            raise UnsupportedShape(f"backward rule missing for op {op!r} (node {nd.name or i})")
        bias_L = bias_L + out.bias_L
        bias_U = bias_U + out.bias_U
    if pending:
        raise ShapeError(f"unresolved coefficients on nodes {sorted(pending)}")
    if diag:
        lb = _diag_to_rows(coef_L, coef_U, bias_L, bias_U)
        return lb.reshape(*node.shape)
    return LinearBounds(coef_L, bias_L, coef_U, bias_U).reshape(*node.shape)


def bound_sublayer(
    program: Program,
    target: int,
    spec: PerturbationSpec,
    x0: np.ndarray,
    terminals: dict[int, LinearBounds],
    relax: dict[int, tuple],
    counter: LambdaCounter | None = None,
) -> tuple[LinearBounds, IntervalBounds]:
    """Backward bounds of one node followed by dual-norm concretization."""
    lb = backward_bounds(program, target, terminals, relax, counter)
    return lb, concretize(lb, spec, x0)
