"""Bound value types, dual-norm concretization and interval arithmetic.

All arithmetic is float64 without directed rounding, so soundness holds up to
floating-point error.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainViolation, ShapeError

INPUT_FRAME = "input"


def parse_norm(p) -> float:
    """Normalise a user-supplied norm order to 1.0, 2.0 or inf."""
    if isinstance(p, str):
        p = p.strip().lower()
        if p in ("inf", "infinity", "linf"):
            return np.inf
        p = float(p)
    p = float(p)
    if p not in (1.0, 2.0, np.inf):
        raise ValueError(f"unsupported norm order {p!r}; use 1, 2 or inf")
    return p


def dual_norm_order(p: float) -> float:
    p = parse_norm(p)
    if p == 1.0:
        return np.inf
    if p == 2.0:
        return 2.0
    return 1.0


def norm_name(p: float) -> str:
    return "inf" if np.isinf(p) else str(int(p))


@dataclass(frozen=True)
class PerturbationSpec:
    """l_p ball of radius ``epsilon`` on the embeddings at ``positions`` (1-based)."""

    p: float
    epsilon: float
    positions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "p", parse_norm(self.p))
        pos = tuple(int(r) for r in self.positions)
        if not pos:
            raise ValueError("at least one perturbed position is required")
        if any(r < 1 for r in pos):
            raise ValueError(f"positions are 1-based, got {pos}")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError(f"positions must be strictly increasing, got {pos}")
        if not (self.epsilon >= 0 and np.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def dual_q(self) -> float:
        return dual_norm_order(self.p)

    @property
    def t(self) -> int:
        return len(self.positions)

    @property
    def index(self) -> np.ndarray:
        """0-based position indices."""
        return np.asarray(self.positions, dtype=int) - 1

    def validate(self, n: int) -> None:
        if self.positions[-1] > n:
            raise ValueError(f"position {self.positions[-1]} outside sequence of length {n}")

    def with_epsilon(self, epsilon: float) -> "PerturbationSpec":
        return PerturbationSpec(self.p, epsilon, self.positions)


@dataclass(frozen=True)
class IntervalBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape:
            raise ShapeError(f"lower {lo.shape} and upper {hi.shape} differ")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def shape(self):
        return self.lower.shape

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, values, slack: float = 0.0) -> np.ndarray:
        values = np.asarray(values)
        return (values >= self.lower - slack) & (values <= self.upper + slack)

    def intersect(self, other: "IntervalBounds") -> "IntervalBounds":
        lo = np.maximum(self.lower, other.lower)
        hi = np.minimum(self.upper, other.upper)
        # both operands are valid bounds, so a crossing can only be rounding noise
        crossed = lo > hi
        mid = 0.5 * (lo + hi)
        return IntervalBounds(np.where(crossed, mid, lo), np.where(crossed, mid, hi))

    def reshape(self, *shape) -> "IntervalBounds":
        return IntervalBounds(self.lower.reshape(*shape), self.upper.reshape(*shape))

    def __getitem__(self, item) -> "IntervalBounds":
        return IntervalBounds(self.lower[item], self.upper[item])


@dataclass(frozen=True)
class LinearBounds:
    """Affine lower/upper functions of reference variables.

    ``lower_coeff`` has shape ``rows + (ref_dims,)`` and ``lower_bias`` shape
    ``rows``. In the input frame the reference vector is the concatenation of
    the perturbed embeddings in position order.
    """

    lower_coeff: np.ndarray
    lower_bias: np.ndarray
    upper_coeff: np.ndarray
    upper_bias: np.ndarray
    frame: str = INPUT_FRAME

    def __post_init__(self):
        if self.lower_coeff.shape != self.upper_coeff.shape:
            raise ShapeError("lower and upper coefficient shapes differ")
        if self.lower_bias.shape != self.upper_bias.shape:
            raise ShapeError("lower and upper bias shapes differ")
        if self.lower_coeff.shape[:-1] != self.lower_bias.shape:
            raise ShapeError(
                f"coefficients {self.lower_coeff.shape} do not match bias {self.lower_bias.shape}"
            )

    @property
    def rows(self) -> tuple[int, ...]:
        return self.lower_bias.shape

    @property
    def ref_dims(self) -> int:
        return self.lower_coeff.shape[-1]

    def evaluate(self, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate both bounds at reference point(s) ``ref`` of shape (..., ref_dims)."""
        ref = np.asarray(ref, dtype=np.float64)
        lo = np.einsum("...k,rk->...r", ref, self.lower_coeff.reshape(-1, self.ref_dims))
        hi = np.einsum("...k,rk->...r", ref, self.upper_coeff.reshape(-1, self.ref_dims))
        lead = ref.shape[:-1]
        lo = lo.reshape(lead + self.rows) + self.lower_bias
        hi = hi.reshape(lead + self.rows) + self.upper_bias
        return lo, hi

    def reshape(self, *rows) -> "LinearBounds":
        return LinearBounds(
            self.lower_coeff.reshape(*rows, self.ref_dims),
            self.lower_bias.reshape(*rows),
            self.upper_coeff.reshape(*rows, self.ref_dims),
            self.upper_bias.reshape(*rows),
            self.frame,
        )


def perturbed_reference(x0: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    """Clean embeddings of the perturbed positions, concatenated in order."""
    x0 = np.asarray(x0, dtype=np.float64)
    spec.validate(x0.shape[0])
    return x0[spec.index].reshape(-1)


def _block_norms(coeff: np.ndarray, t: int, q: float) -> np.ndarray:
    blocks = coeff.reshape(coeff.shape[:-1] + (t, coeff.shape[-1] // t))
    # overflow to inf only loosens the bound
    with np.errstate(over="ignore"):
        return np.linalg.norm(blocks, ord=q, axis=-1).sum(axis=-1)


def concretize(lb: LinearBounds, spec: PerturbationSpec, x0: np.ndarray) -> IntervalBounds:
    """Global interval bounds of ``lb`` over the perturbation set.

    The norm term is taken per perturbed position with the dual norm, so each
    block of ``spec.t`` equal-width blocks contributes ``eps * ||block||_q``.
    """
    if lb.frame != INPUT_FRAME:
        raise ShapeError(f"can only concretize input-frame bounds, got frame {lb.frame!r}")
    ref = perturbed_reference(x0, spec)
    if lb.ref_dims != ref.size:
        raise ShapeError(f"bounds have {lb.ref_dims} reference dims, perturbation has {ref.size}")
    for arr in (lb.lower_coeff, lb.upper_coeff, lb.lower_bias, lb.upper_bias):
        if not np.all(np.isfinite(arr)):
            raise DomainViolation("non-finite linear bound coefficients")
    center_lo, center_hi = lb.evaluate(ref)
    eps, q, t = spec.epsilon, spec.dual_q, spec.t
    if eps == 0.0:
        return IntervalBounds(center_lo, center_hi)
    lo = center_lo - eps * _block_norms(lb.lower_coeff, t, q)
    hi = center_hi + eps * _block_norms(lb.upper_coeff, t, q)
    return IntervalBounds(lo, hi)


def input_box(x0: np.ndarray, spec: PerturbationSpec) -> IntervalBounds:
    """Coordinate-wise box containing the perturbation set (exact for l_inf)."""
    x0 = np.asarray(x0, dtype=np.float64)
    spec.validate(x0.shape[0])
    lo, hi = x0.copy(), x0.copy()
    lo[spec.index] -= spec.epsilon
    hi[spec.index] += spec.epsilon
    return IntervalBounds(lo, hi)


# ---------------------------------------------------------------- interval arithmetic


def ibp_affine(iv: IntervalBounds, W: np.ndarray, b=None) -> IntervalBounds:
    """Interval image of ``x -> W x + b`` applied along the last axis.

    Equivalent to the center/radius form ``W c + b +- |W| r`` but evaluated as
    ``W+ l + W- u`` so that huge, nearly equal endpoints do not cancel.
    """
    W = np.asarray(W, dtype=np.float64)
    if iv.shape[-1] != W.shape[1]:
        raise ShapeError(f"interval width {iv.shape[-1]} does not match W {W.shape}")
    Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
    with np.errstate(invalid="ignore", over="ignore"):
        lo = iv.lower @ Wp.T + iv.upper @ Wn.T
        hi = iv.upper @ Wp.T + iv.lower @ Wn.T
    if b is not None:
        b = np.asarray(b, dtype=np.float64)
        try:
            lo, hi = lo + b, hi + b
        except ValueError as exc:
            raise ShapeError(f"bias {b.shape} incompatible with output {lo.shape}") from exc
    return IntervalBounds(lo, hi)


_MONOTONE = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "exp": np.exp,
    "sqrt": np.sqrt,
}


def ibp_elementwise(iv: IntervalBounds, kind: str) -> IntervalBounds:
    """Exact interval image of an elementwise function."""
    lo, hi = iv.lower, iv.upper
    if kind in _MONOTONE:
        if kind == "sqrt" and np.any(lo < 0):
            raise DomainViolation("sqrt requires a non-negative lower bound")
        f = _MONOTONE[kind]
        with np.errstate(over="ignore"):
            return IntervalBounds(f(lo), f(hi))
    if kind == "reciprocal":
        if np.any(lo <= 0):
            raise DomainViolation("reciprocal requires a positive lower bound")
        return IntervalBounds(1.0 / hi, 1.0 / lo)
    if kind == "square":
        sq_lo, sq_hi = lo * lo, hi * hi
        low = np.where((lo < 0) & (hi > 0), 0.0, np.minimum(sq_lo, sq_hi))
        return IntervalBounds(low, np.maximum(sq_lo, sq_hi))
    raise ValueError(f"unknown elementwise function {kind!r}")


def _einsum_union(x_idx: str, y_idx: str) -> str:
    return "".join(dict.fromkeys(x_idx + y_idx))


def ibp_bilinear(ivx: IntervalBounds, ivy: IntervalBounds, spec: str) -> IntervalBounds:
    """Interval image of ``einsum(spec, x, y)``: exact per product term, then summed."""
    operands, z_idx = spec.split("->")
    x_idx, y_idx = operands.split(",")
    union = _einsum_union(x_idx, y_idx)
    with np.errstate(invalid="ignore", over="ignore"):
        corners = [
            np.einsum(f"{x_idx},{y_idx}->{union}", a, b)
            for a in (ivx.lower, ivx.upper)
            for b in (ivy.lower, ivy.upper)
        ]
        lo = np.minimum.reduce(corners)
        hi = np.maximum.reduce(corners)
        return IntervalBounds(np.einsum(f"{union}->{z_idx}", lo), np.einsum(f"{union}->{z_idx}", hi))


def ibp_add(a: IntervalBounds, b: IntervalBounds) -> IntervalBounds:
    return IntervalBounds(a.lower + b.lower, a.upper + b.upper)
