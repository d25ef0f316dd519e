"""Bound computation for a whole program under one perturbation.

Methods:

``bf``   hybrid: backward bounds for non-attention nodes, stopping at the
         nearest attention output, whose bounds come from a forward pass
         through the attention internals
``fb``   fully-backward: attention expanded into primitives and every node
         bounded by backward substitution down to the input
``ff``   fully-forward: input-frame linear bounds pushed through every node
``ibp``  interval arithmetic only

Every node's interval is the one-step interval image of its parents'
intervals, intersected with the linear-bound concretization when the node
needs tight bounds (an operand of a nonlinearity, or the output).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .backward import LambdaCounter, backward_bounds
from .bounds import IntervalBounds, LinearBounds, PerturbationSpec, concretize, input_box
from .errors import DomainViolation, UnsupportedShape
from .forward import (
    ForwardBounds,
    OmegaCounter,
    bilinear_relaxation,
    forward_attention_block,
    fully_forward_sublayer,
    input_forward,
    to_forward_frame,
    unary_relaxation,
)
from .program import Program, compile_model, ibp_node
from .model import TransformerModel

METHODS = ("bf", "fb", "ff", "ibp")
METHOD_NAMES = {
    "bf": "BackwardForward",
    "fb": "FullyBackward",
    "ff": "FullyForward",
    "ibp": "IBP",
}


def parse_method(method: str) -> str:
    key = str(method).lower().replace("-", "").replace("_", "").replace("&", "")
    aliases = {
        "bf": "bf", "backwardforward": "bf",
        "fb": "fb", "fullybackward": "fb",
        "ff": "ff", "fullyforward": "ff",
        "ibp": "ibp",
    }
    if key not in aliases:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    return aliases[key]


@dataclass
class BoundResult:
    method: str
    intervals: list[IntervalBounds]
    linear: dict[int, LinearBounds]
    output: IntervalBounds
    lambda_entries: int = 0
    lambda_steps: int = 0
    omega_entries: int = 0
    seconds: float = 0.0
    attention_inner: dict = field(default_factory=dict)


def needed_nodes(program: Program) -> set[int]:
    """Nodes whose bounds feed a relaxation, plus the output."""
    need = {program.output}
    for node in program.nodes:
        if node.op in ("unary", "bilinear", "attention"):
            need.update(node.parents)
    return need


def _relaxation(node, ivs):
    if node.op == "unary":
        return unary_relaxation(node.params["kind"], ivs[node.parents[0]])
    if node.op == "bilinear":
        return bilinear_relaxation(node.params["spec"], ivs[node.parents[0]], ivs[node.parents[1]])
    return None


def _check(iv: IntervalBounds, name: str) -> IntervalBounds:
    if not iv.is_finite():
        raise DomainViolation(f"non-finite bounds at node {name}")
    return iv


def propagate(program: Program, x0: np.ndarray, spec: PerturbationSpec, method: str = "bf",
              all_nodes: bool = False) -> BoundResult:
    """Bound every node of ``program`` for embeddings ``x0`` under ``spec``.

    ``program`` must already be expanded for the fully-backward method.
    With ``all_nodes`` the linear-bound methods tighten every node rather
    than only the ones that feed relaxations.
    """
    method = parse_method(method)
    start = time.perf_counter()
    x0 = np.asarray(x0, dtype=np.float64)
    spec.validate(x0.shape[0])
    lam, omg = LambdaCounter(), OmegaCounter()
    need = set(range(len(program))) if all_nodes else needed_nodes(program)
    ivs: list[IntervalBounds | None] = [None] * len(program)
    linear: dict[int, LinearBounds] = {}
    terminals: dict[int, LinearBounds] = {}
    relax: dict[int, tuple] = {}
    inner: dict = {}

    for i, node in enumerate(program.nodes):
        name = node.name or str(i)
        if node.op == "input":
            ivs[i] = input_box(x0, spec)
            fb = input_forward(x0, spec)
            terminals[i] = linear[i] = fb
            continue
        p_ivs = [ivs[p] for p in node.parents]
        if method == "ibp":
            ivs[i] = _check(ibp_node(node, p_ivs), name)
            continue
        if method == "ff":
            parents = [linear[p] for p in node.parents]
            if node.op == "attention":
                fb, iv = forward_attention_block(node.params["sub"], parents, p_ivs, spec, x0, omg)
            else:
                fb = fully_forward_sublayer(node, parents, p_ivs)
                omg.add(fb)
                iv = ibp_node(node, p_ivs).intersect(concretize(fb, spec, x0))
            linear[i] = fb
            ivs[i] = _check(iv, name)
            continue
        # bf / fb
        if node.op == "attention":
            if method == "fb":
                raise UnsupportedShape("expand attention before fully-backward bounding")
            qkv = [to_forward_frame(linear[p]) for p in node.parents]
            fb, iv = forward_attention_block(node.params["sub"], qkv, p_ivs, spec, x0, omg)
            terminals[i] = linear[i] = fb
            ivs[i] = _check(iv, name)
            continue
        r = _relaxation(node, ivs)
        if r is not None:
            relax[i] = r
        step = ibp_node(node, p_ivs)
        if i in need:
            lb = backward_bounds(program, i, terminals, relax, lam)
            linear[i] = lb
            step = step.intersect(concretize(lb, spec, x0))
        ivs[i] = _check(step, name)

    return BoundResult(
        method=method,
        intervals=ivs,
        linear=linear,
        output=ivs[program.output],
        lambda_entries=lam.entries,
        lambda_steps=lam.steps,
        omega_entries=omg.entries,
        seconds=time.perf_counter() - start,
        attention_inner=inner,
    )


def program_for(model: TransformerModel, n: int, label: int | None, method: str) -> Program:
    prog = compile_model(model, n, label)
    if parse_method(method) == "fb":
        prog = prog.expand_attention()
    return prog


class BoundEngine:
    """Caches the compiled program for one (model, input, label, method)."""

    def __init__(self, model: TransformerModel, token_ids, label: int, method: str = "bf"):
        self.model = model
        self.method = parse_method(method)
        self.x0 = model.embeddings(token_ids)
        self.label = int(label)
        self.program = program_for(model, self.x0.shape[0], self.label, self.method)

    def run(self, spec: PerturbationSpec, all_nodes: bool = False) -> BoundResult:
        return propagate(self.program, self.x0, spec, self.method, all_nodes)

    def margin_lower(self, spec: PerturbationSpec) -> tuple[float, BoundResult]:
        res = self.run(spec)
        return float(np.min(res.output.lower)), res
