"""Closed-form linear relaxations of unary nonlinearities and of x*y, x/y.

Every function accepts scalars or equally-shaped arrays of interval endpoints
and applies the same branch selection elementwise. Scalar inputs give scalar
(float) parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainViolation, RangeOverflow

EXP_TANGENT_MARGIN = 1e-2
EXP_MAX_INPUT = 700.0
TANH_BISECT_TOL = 1e-8
TANH_BISECT_MAX_ITER = 100
_DEGENERATE_RTOL = 1e-12


@dataclass(frozen=True)
class UnaryRelaxation:
    """Lines ``alpha_l*x + beta_l <= f(x) <= alpha_u*x + beta_u`` on [l, u]."""

    alpha_l: float | np.ndarray
    beta_l: float | np.ndarray
    alpha_u: float | np.ndarray
    beta_u: float | np.ndarray

    def lower(self, x):
        return self.alpha_l * x + self.beta_l

    def upper(self, x):
        return self.alpha_u * x + self.beta_u


@dataclass(frozen=True)
class BilinearRelaxation:
    """Planes ``alpha*x + beta*y + gamma`` bounding a function of (x, y) on a box."""

    alpha_l: float | np.ndarray
    beta_l: float | np.ndarray
    gamma_l: float | np.ndarray
    alpha_u: float | np.ndarray
    beta_u: float | np.ndarray
    gamma_u: float | np.ndarray

    def lower(self, x, y):
        return self.alpha_l * x + self.beta_l * y + self.gamma_l

    def upper(self, x, y):
        return self.alpha_u * x + self.beta_u * y + self.gamma_u


def _prepare(l, u):
    scalar = np.ndim(l) == 0 and np.ndim(u) == 0
    l, u = np.broadcast_arrays(np.asarray(l, dtype=np.float64), np.asarray(u, dtype=np.float64))
    if np.any(l > u):
        raise ValueError("relaxation requires l <= u")
    return scalar, l, u


def _finish(scalar, cls, *params):
    if scalar:
        return cls(*(float(p) for p in params))
    return cls(*params)


def _degenerate(l, u):
    scale = np.maximum(1.0, np.maximum(np.abs(l), np.abs(u)))
    return (u - l) <= _DEGENERATE_RTOL * scale


def _chord(f, l, u):
    """Slope and intercept of the line through (l, f(l)) and (u, f(u))."""
    fl, fu = f(l), f(u)
    width = u - l
    safe = np.where(width > 0, width, 1.0)
    slope = np.where(width > 0, (fu - fl) / safe, 0.0)
    return slope, fl - slope * l


def _tangent(f, df, d):
    slope = df(d)
    return slope, f(d) - slope * d


# ---------------------------------------------------------------------- ReLU


def relu_params(l, u):
    l, u = np.asarray(l, dtype=np.float64), np.asarray(u, dtype=np.float64)
    active = l >= 0
    dead = (u <= 0) & ~active
    cross = ~active & ~dead
    width = np.where(cross, u - l, 1.0)
    a_u = np.where(active, 1.0, np.where(cross, u / width, 0.0))
    b_u = np.where(cross, -l * u / width, 0.0)
    a_l = np.where(active, 1.0, np.where(cross & (u >= -l), 1.0, 0.0))
    b_l = np.zeros_like(a_l)
    return a_l, b_l, a_u, b_u


def relax_relu(l, u) -> UnaryRelaxation:
    scalar, l, u = _prepare(l, u)
    return _finish(scalar, UnaryRelaxation, *relu_params(l, u))


# ---------------------------------------------------------------------- tanh


def _dtanh(x):
    return 1.0 - np.tanh(x) ** 2


def _tanh_cross_lower(l, u):
    """Line through (u, tanh u) tangent to tanh at some d <= 0, for l < 0 < u.

    Falls back to the chord when the tangent point would lie left of l.
    The bisection keeps the bracket end with the larger slope, which only
    lowers the line and so keeps it valid.
    """
    fu = np.tanh(u)

    def gap(d):
        return np.tanh(d) + _dtanh(d) * (u - d) - fu

    use_chord = gap(l) >= 0
    lo, hi = l.copy(), np.zeros_like(l)
    for _ in range(TANH_BISECT_MAX_ITER):
        if lo.size == 0 or np.max(hi - lo) < TANH_BISECT_TOL:
            break
        mid = 0.5 * (lo + hi)
        above = gap(mid) >= 0
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    chord_slope, _ = _chord(np.tanh, l, u)
    slope = np.where(use_chord, chord_slope, _dtanh(hi))
    return slope, fu - slope * u


def tanh_params(l, u):
    l, u = np.asarray(l, dtype=np.float64), np.asarray(u, dtype=np.float64)
    a_l, b_l = np.zeros_like(l), np.zeros_like(l)
    a_u, b_u = np.zeros_like(l), np.zeros_like(l)
    mid = 0.5 * (l + u)
    deg = _degenerate(l, u)
    concave = (l >= 0) & ~deg
    convex = (u <= 0) & ~concave & ~deg
    cross = ~concave & ~convex & ~deg

    t_a, t_b = _tangent(np.tanh, _dtanh, mid)
    c_a, c_b = _chord(np.tanh, l, u)
    for mask, lower, upper in (
        (deg, (t_a, t_b), (t_a, t_b)),
        (concave, (c_a, c_b), (t_a, t_b)),
        (convex, (t_a, t_b), (c_a, c_b)),
    ):
        a_l = np.where(mask, lower[0], a_l)
        b_l = np.where(mask, lower[1], b_l)
        a_u = np.where(mask, upper[0], a_u)
        b_u = np.where(mask, upper[1], b_u)

    if np.any(cross):
        lc, uc = l[cross], u[cross]
        la, lb = _tanh_cross_lower(lc, uc)
        # tanh is odd: the upper line on [l, u] mirrors the lower line on [-u, -l]
        ua, ub = _tanh_cross_lower(-uc, -lc)
        a_l[cross], b_l[cross] = la, lb
        a_u[cross], b_u[cross] = ua, -ub
    return a_l, b_l, a_u, b_u


def relax_tanh(l, u) -> UnaryRelaxation:
    scalar, l, u = _prepare(l, u)
    return _finish(scalar, UnaryRelaxation, *tanh_params(l, u))


# ---------------------------------------------------------------------- exp


def exp_params(l, u):
    l, u = np.asarray(l, dtype=np.float64), np.asarray(u, dtype=np.float64)
    if np.any(u > EXP_MAX_INPUT):
        raise RangeOverflow(f"exp upper input {np.max(u):.3g} exceeds {EXP_MAX_INPUT}")
    # tangent point capped so the lower line stays positive at x = l
    d = np.minimum(0.5 * (l + u), l + 1.0 - EXP_TANGENT_MARGIN)
    a_l, b_l = _tangent(np.exp, np.exp, d)
    deg = _degenerate(l, u)
    c_a, c_b = _chord(np.exp, l, u)
    t_a, t_b = _tangent(np.exp, np.exp, 0.5 * (l + u))
    a_u = np.where(deg, t_a, c_a)
    b_u = np.where(deg, t_b, c_b)
    return a_l, b_l, a_u, b_u


def relax_exp(l, u) -> UnaryRelaxation:
    scalar, l, u = _prepare(l, u)
    return _finish(scalar, UnaryRelaxation, *exp_params(l, u))


# ---------------------------------------------------------------------- 1/x


def reciprocal_params(l, u):
    l, u = np.asarray(l, dtype=np.float64), np.asarray(u, dtype=np.float64)
    if np.any(l <= 0):
        raise DomainViolation("reciprocal relaxation requires l > 0")
    # chord through (l, 1/l), (u, 1/u); exact tangent when l == u
    a_u = -1.0 / (l * u)
    b_u = 1.0 / l + 1.0 / u
    m = 0.5 * (l + u)
    with np.errstate(over="ignore"):
        a_l = -1.0 / (m * m)
    b_l = 2.0 / m
    return a_l, b_l, a_u, b_u


def relax_reciprocal(l, u) -> UnaryRelaxation:
    scalar, l, u = _prepare(l, u)
    return _finish(scalar, UnaryRelaxation, *reciprocal_params(l, u))


# ---------------------------------------------------------------------- x^2


def square_params(l, u):
    l, u = np.asarray(l, dtype=np.float64), np.asarray(u, dtype=np.float64)
    mid = 0.5 * (l + u)
    # tangent point chosen so the lower line is >= 0 on the whole interval
    d = np.where(u <= 0, np.maximum(mid, 2.0 * u), np.where(l >= 0, np.minimum(mid, 2.0 * l), 0.0))
    a_l, b_l = 2.0 * d, -d * d
    a_u, b_u = l + u, -l * u
    return a_l, b_l, a_u, b_u


def relax_square(l, u) -> UnaryRelaxation:
    scalar, l, u = _prepare(l, u)
    return _finish(scalar, UnaryRelaxation, *square_params(l, u))


# ---------------------------------------------------------------------- sqrt


def sqrt_params(l, u):
    l, u = np.asarray(l, dtype=np.float64), np.asarray(u, dtype=np.float64)
    if np.any(l < 0):
        raise DomainViolation("sqrt relaxation requires l >= 0")
    sl, su = np.sqrt(l), np.sqrt(u)
    denom = sl + su
    safe = np.where(denom > 0, denom, 1.0)
    a_l = np.where(denom > 0, 1.0 / safe, 0.0)
    b_l = np.where(denom > 0, sl * su / safe, 0.0)
    sm = np.sqrt(0.5 * (l + u))
    safe_m = np.where(sm > 0, sm, 1.0)
    a_u = np.where(sm > 0, 0.5 / safe_m, 0.0)
    b_u = np.where(sm > 0, 0.5 * sm, 0.0)
    return a_l, b_l, a_u, b_u


def relax_sqrt(l, u) -> UnaryRelaxation:
    scalar, l, u = _prepare(l, u)
    return _finish(scalar, UnaryRelaxation, *sqrt_params(l, u))


UNARY_PARAMS = {
    "relu": relu_params,
    "tanh": tanh_params,
    "exp": exp_params,
    "reciprocal": reciprocal_params,
    "square": square_params,
    "sqrt": sqrt_params,
}

UNARY_FUNCTIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "exp": np.exp,
    "reciprocal": lambda x: 1.0 / x,
    "square": np.square,
    "sqrt": np.sqrt,
}


def relax_unary(kind: str, l, u) -> UnaryRelaxation:
    try:
        params = UNARY_PARAMS[kind]
    except KeyError:
        raise ValueError(f"unknown unary function {kind!r}") from None
    scalar, l, u = _prepare(l, u)
    return _finish(scalar, UnaryRelaxation, *params(l, u))


# ---------------------------------------------------------------------- x*y, x/y


def bound_multiply(lx, ux, ly, uy) -> BilinearRelaxation:
    """Volume-optimal planes for z = x*y on [lx, ux] x [ly, uy]."""
    scalar = all(np.ndim(v) == 0 for v in (lx, ux, ly, uy))
    lx, ux, ly, uy = (np.asarray(v, dtype=np.float64) for v in (lx, ux, ly, uy))
    if np.any(lx > ux) or np.any(ly > uy):
        raise ValueError("bound_multiply requires lx <= ux and ly <= uy")
    return _finish(scalar, BilinearRelaxation, ly, lx, -lx * ly, uy, lx, -lx * uy)


def bound_divide(lx, ux, ly, uy) -> BilinearRelaxation:
    """Planes for z = x/y built from a reciprocal relaxation and a product bound."""
    scalar = all(np.ndim(v) == 0 for v in (lx, ux, ly, uy))
    lx, ux, ly, uy = (np.asarray(v, dtype=np.float64) for v in (lx, ux, ly, uy))
    if np.any(ly <= 0):
        raise DomainViolation("division requires a positive denominator lower bound")
    rec = relax_reciprocal(ly, uy)
    prod = bound_multiply(lx, ux, 1.0 / uy, 1.0 / ly)
    # z >= a x + b*ybar + c: bound ybar from below if b >= 0, from above otherwise
    ya_l = np.where(prod.beta_l >= 0, rec.alpha_l, rec.alpha_u)
    yb_l = np.where(prod.beta_l >= 0, rec.beta_l, rec.beta_u)
    ya_u = np.where(prod.beta_u >= 0, rec.alpha_u, rec.alpha_l)
    yb_u = np.where(prod.beta_u >= 0, rec.beta_u, rec.beta_l)
    return _finish(
        scalar,
        BilinearRelaxation,
        prod.alpha_l,
        prod.beta_l * ya_l,
        prod.gamma_l + prod.beta_l * yb_l,
        prod.alpha_u,
        prod.beta_u * ya_u,
        prod.gamma_u + prod.beta_u * yb_u,
    )
