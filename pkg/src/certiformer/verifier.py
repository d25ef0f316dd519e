"""Certification drivers: margins, certified radii, upper bounds, importance, ablation."""
from __future__ import annotations

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .bounds import PerturbationSpec, norm_name, parse_norm
from .engine import METHOD_NAMES, BoundEngine, parse_method
from .errors import CertiformerError, DomainViolation, Misclassified, RangeOverflow
from .model import TransformerModel, forward_embeddings, forward_eval, input_gradients


@dataclass(frozen=True)
class SearchConfig:
    """Binary-search settings for the certified radius."""

    eps_max: float = 10.0
    rel_tol: float = 1e-3
    max_iter: int = 30

    def __post_init__(self):
        if not (self.eps_max > 0 and np.isfinite(self.eps_max)):
            raise ValueError("eps_max must be positive and finite")
        if not 0 < self.rel_tol < 1:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class CertifyResult:
    positions: tuple[int, ...]
    certified_epsilon: float
    delta_lower: float
    iterations: int
    probes: list[tuple[float, float]] = field(default_factory=list)
    lambda_entries: int = 0
    omega_entries: int = 0
    seconds: float = 0.0


def clean_label(model: TransformerModel, token_ids, label: int | None = None) -> int:
    pred = int(np.argmax(forward_eval(model, token_ids)))
    if label is not None and pred != label:
        raise Misclassified(pred, label)
    return pred


def delta_lower(model: TransformerModel, token_ids, spec: PerturbationSpec, method: str = "bf",
                label: int | None = None, engine: BoundEngine | None = None) -> float:
    """Certified lower bound on min_y (logit_label - logit_y) over the perturbation set."""
    label = clean_label(model, token_ids, label)
    engine = engine or BoundEngine(model, token_ids, label, method)
    value, _ = engine.margin_lower(spec)
    return value


def _probe(engine: BoundEngine, spec: PerturbationSpec):
    try:
        value, res = engine.margin_lower(spec)
    except (RangeOverflow, DomainViolation, FloatingPointError):
        return -np.inf, None
    if not np.isfinite(value):
        return -np.inf, res
    return value, res


def certify_epsilon(model: TransformerModel, token_ids, positions, p=2, method: str = "bf",
                    search: SearchConfig | None = None, label: int | None = None,
                    engine: BoundEngine | None = None) -> CertifyResult:
    """Largest radius in ``[0, eps_max]`` at which the margin bound stays positive.

    Bisection on the bracket ``[lo, hi]`` where ``lo`` is always a radius
    that was verified directly; stops once ``(hi - lo) / hi`` drops below
    ``rel_tol`` or after ``max_iter`` probes.
    """
    search = search or SearchConfig()
    label = clean_label(model, token_ids, label)
    engine = engine or BoundEngine(model, token_ids, label, method)
    template = PerturbationSpec(p, 0.0, tuple(positions))
    template.validate(len(token_ids))
    start = time.perf_counter()
    probes: list[tuple[float, float]] = []
    lam = omg = 0

    def check(eps):
        nonlocal lam, omg
        value, res = _probe(engine, template.with_epsilon(eps))
        probes.append((eps, value))
        if res is not None:
            lam += res.lambda_entries
            omg += res.omega_entries
        return value

    clean = check(0.0)
    if not clean > 0:
        raise Misclassified(label, label)
    lo, lo_val, hi = 0.0, clean, search.eps_max
    iters = 1
    top = check(hi)
    if top > 0:
        lo, lo_val = hi, top
    else:
        while iters < search.max_iter and (hi - lo) / hi >= search.rel_tol:
            mid = 0.5 * (lo + hi)
            val = check(mid)
            iters += 1
            if val > 0:
                lo, lo_val = mid, val
            else:
                hi = mid
    return CertifyResult(tuple(template.positions), lo, lo_val, iters, probes, lam, omg,
                         time.perf_counter() - start)


def enumerate_position_sets(n: int, t: int, max_sets: int = 128) -> tuple[list[tuple[int, ...]], bool]:
    """Lexicographic t-subsets of {1..n}, truncated at ``max_sets``."""
    if not 1 <= t <= n:
        raise ValueError(f"need 1 <= t <= n, got t={t}, n={n}")
    sets = list(itertools.islice(itertools.combinations(range(1, n + 1), t), max_sets + 1))
    truncated = len(sets) > max_sets
    return sets[:max_sets], truncated


def upper_bound_substitution(model: TransformerModel, token_ids, position: int, p=2,
                             candidates=None) -> float:
    """Smallest l_p distance to a vocabulary word whose substitution flips the prediction.

    ``position`` is 1-based. Returns ``inf`` when no substitution flips it.
    """
    p = parse_norm(p)
    ids = np.asarray(token_ids, dtype=int)
    idx = position - 1
    x0 = model.embeddings(ids)
    pred = int(np.argmax(forward_embeddings(model, x0)))
    words = np.arange(model.embed.shape[0]) if candidates is None else np.asarray(candidates, dtype=int)
    words = words[words != ids[idx]]
    if words.size == 0:
        return float("inf")
    batch = np.repeat(x0[None], words.size, axis=0)
    batch[:, idx] = model.embed[words]
    flipped = np.argmax(forward_embeddings(model, batch), axis=-1) != pred
    if not flipped.any():
        return float("inf")
    dist = np.linalg.norm(model.embed[words[flipped]] - x0[idx], ord=p, axis=-1)
    return float(dist.min())


def set_upper_bound(model, token_ids, positions, p=2) -> float:
    """Upper bound for a position set: any single flipping substitution inside it."""
    return min(upper_bound_substitution(model, token_ids, r, p) for r in positions)


@dataclass
class ImportanceRanking:
    tokens: list[str]
    scores: list[float]
    upper_scores: list[float]
    gradient_norms: list[float]
    ours: list[int]
    upper: list[int]
    gradient: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def _ranked(values, descending=False) -> list[int]:
    vals = np.asarray(values, dtype=np.float64)
    key = -vals if descending else vals
    return [int(i) + 1 for i in np.argsort(key, kind="stable")]


def importance_ranking(model: TransformerModel, token_ids, p=2, method: str = "bf",
                       search: SearchConfig | None = None, tokens=None,
                       label: int | None = None) -> ImportanceRanking:
    """Rank positions by normalized certified radius (smallest = most important).

    Baselines: normalized substitution upper bounds (smallest first) and
    finite-difference gradient norms (largest first). Rankings list 1-based
    positions, most important first.
    """
    label = clean_label(model, token_ids, label)
    engine = BoundEngine(model, token_ids, label, method)
    x0 = model.embeddings(token_ids)
    norms = np.linalg.norm(x0, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    n = len(token_ids)
    eps = [certify_epsilon(model, token_ids, (i,), p, method, search, label, engine).certified_epsilon
           for i in range(1, n + 1)]
    scores = np.asarray(eps) / norms
    upper = np.asarray([upper_bound_substitution(model, token_ids, i, p) for i in range(1, n + 1)]) / norms
    logits = forward_eval(model, token_ids)
    other = int(np.argsort(-logits, kind="stable")[1]) if logits.size > 1 else label
    grads = input_gradients(model, token_ids, (label, other))
    tokens = list(tokens) if tokens is not None else [str(int(t)) for t in token_ids]
    return ImportanceRanking(
        tokens=tokens,
        scores=[float(s) for s in scores],
        upper_scores=[float(s) for s in upper],
        gradient_norms=[float(g) for g in grads],
        ours=_ranked(scores),
        upper=_ranked(upper),
        gradient=_ranked(grads, descending=True),
    )


# ---------------------------------------------------------------- reports


@dataclass
class SetEntry:
    positions: tuple[int, ...]
    certified_epsilon: float
    delta_lower: float
    iterations: int
    lambda_entries: int
    omega_entries: int
    seconds: float
    upper_bound: float | None = None


@dataclass
class VerificationReport:
    method: str
    p: float
    t: int
    label: int
    entries: list[SetEntry] = field(default_factory=list)
    truncated: bool = False
    misclassified: bool = False

    @property
    def epsilons(self) -> np.ndarray:
        return np.asarray([e.certified_epsilon for e in self.entries], dtype=np.float64)

    @property
    def min_epsilon(self) -> float:
        return float(self.epsilons.min()) if self.entries else 0.0

    @property
    def avg_epsilon(self) -> float:
        return float(self.epsilons.mean()) if self.entries else 0.0

    @property
    def seconds(self) -> float:
        return float(sum(e.seconds for e in self.entries))

    def to_dict(self, timing: bool = False) -> dict:
        sets = []
        for e in self.entries:
            row = {
                "positions": list(e.positions),
                "certified_epsilon": e.certified_epsilon,
                "delta_lower": e.delta_lower,
                "iterations": e.iterations,
                "lambda_entries": e.lambda_entries,
                "omega_entries": e.omega_entries,
            }
            if e.upper_bound is not None:
                row["upper_bound"] = e.upper_bound if np.isfinite(e.upper_bound) else None
            if timing:
                row["seconds"] = e.seconds
            sets.append(row)
        out = {
            "method": METHOD_NAMES[self.method],
            "p": norm_name(self.p),
            "t": self.t,
            "label": self.label,
            "misclassified": self.misclassified,
            "truncated": self.truncated,
            "sets": sets,
            "min": self.min_epsilon,
            "avg": self.avg_epsilon,
        }
        if timing:
            out["seconds"] = self.seconds
        return out


def verify(model: TransformerModel, token_ids, p=2, t: int = 1, method: str = "bf",
           position_sets=None, max_sets: int = 128, search: SearchConfig | None = None,
           label: int | None = None, with_upper: bool = False, threads: int = 1) -> VerificationReport:
    """Certify every position set of size ``t`` (or the given sets).

    With ``threads > 1`` position sets run concurrently; entries keep the
    enumeration order and each certification is deterministic on its own.
    """
    method = parse_method(method)
    p = parse_norm(p)
    pred = int(np.argmax(forward_eval(model, token_ids)))
    target = pred if label is None else int(label)
    report = VerificationReport(method, p, t, target)
    if pred != target:
        report.misclassified = True
        return report
    if position_sets is None:
        position_sets, report.truncated = enumerate_position_sets(len(token_ids), t, max_sets)
    engine = BoundEngine(model, token_ids, target, method)

    def one(ps):
        res = certify_epsilon(model, token_ids, ps, p, method, search, target, engine)
        ub = set_upper_bound(model, token_ids, ps, p) if with_upper else None
        return SetEntry(tuple(ps), res.certified_epsilon, res.delta_lower, res.iterations,
                        res.lambda_entries, res.omega_entries, res.seconds, ub)

    if threads > 1 and len(position_sets) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            report.entries = list(pool.map(one, position_sets))
    else:
        report.entries = [one(ps) for ps in position_sets]
    return report


def run_ablation(models, inputs, p_norms=(1, 2, np.inf), t: int = 1, methods=("ff", "fb", "bf"),
                 max_sets: int = 128, search: SearchConfig | None = None) -> list[dict]:
    """Certified radius, wall time and counters per (model, input, norm, method).

    ``models`` and ``inputs`` are parallel sequences; each input is a list of
    token ids for the matching model.
    """
    rows = []
    for mi, (model, ids) in enumerate(zip(models, inputs)):
        for p in p_norms:
            row = {"instance": mi, "p": norm_name(parse_norm(p)), "methods": {}}
            for m in methods:
                try:
                    rep = verify(model, ids, p, t, m, max_sets=max_sets, search=search)
                except CertiformerError as exc:
                    row["methods"][m] = {"error": str(exc)}
                    continue
                row["methods"][m] = {
                    "min": rep.min_epsilon,
                    "avg": rep.avg_epsilon,
                    "seconds": rep.seconds,
                    "lambda_entries": int(sum(e.lambda_entries for e in rep.entries)),
                    "omega_entries": int(sum(e.omega_entries for e in rep.entries)),
                    "misclassified": rep.misclassified,
                }
            rows.append(row)
    return rows
