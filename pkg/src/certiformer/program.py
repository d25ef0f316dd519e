"""Sub-layer programs: a Transformer lowered to a DAG of primitive ops.

Every node carries a static ``shape`` and one of these ops:

``input``      perturbable embeddings (or a placeholder inside a sub-program)
``affine``     ``x @ W.T + b`` along the last axis (``b`` may vary per position)
``add``        residual sum of two parents
``unary``      elementwise relu / tanh / exp / reciprocal / square / sqrt
``bilinear``   ``einsum(spec, x, y)``, a sum of products of two parents
``reshape``    view change that keeps the leading position axis
``pool``       mean over positions, ``[n, d] -> [1, d]``
``attention``  multi-head self-attention on (q, k, v); expandable into the
               exp / sum / reciprocal / multiply primitives

A node is ``local`` when its leading axis indexes token positions and no
position mixing happens between it and its parents.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .bounds import IntervalBounds, ibp_affine, ibp_add, ibp_bilinear, ibp_elementwise
from .errors import ShapeError, UnsupportedShape
from .model import TransformerModel, margin_matrix

UNARY_EVAL = {
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
    "exp": np.exp,
    "reciprocal": lambda x: 1.0 / x,
    "square": np.square,
    "sqrt": np.sqrt,
}


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    shape: tuple[int, ...]
    local: bool = True
    params: dict = field(default_factory=dict)
    name: str = ""

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def split_spec(spec: str) -> tuple[str, str, str]:
    operands, z = spec.split("->")
    x, y = operands.split(",")
    return x, y, z


class Program:
    """Topologically ordered list of nodes; node ids are list indices."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.output: int | None = None
        self.meta: dict = {}

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, i: int) -> Node:
        return self.nodes[i]

    def add(self, op, parents, shape, local=True, name="", **params) -> int:
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise ShapeError(f"parent {p} does not precede node {len(self.nodes)}")
        self.nodes.append(Node(op, tuple(parents), tuple(int(s) for s in shape), local, params, name))
        return len(self.nodes) - 1

    # -------------------------------------------------------------- construction

    def affine(self, x, W, b=None, name=""):
        W = np.asarray(W, dtype=np.float64)
        src = self.nodes[x]
        if src.shape[-1] != W.shape[1]:
            raise ShapeError(f"{name or 'affine'}: input width {src.shape[-1]} vs W {W.shape}")
        if b is not None:
            b = np.asarray(b, dtype=np.float64)
        return self.add("affine", (x,), src.shape[:-1] + (W.shape[0],), src.local, name, W=W, b=b)

    def unary(self, x, kind, name=""):
        if kind not in UNARY_EVAL:
            raise UnsupportedShape(f"unknown unary op {kind!r}")
        src = self.nodes[x]
        return self.add("unary", (x,), src.shape, src.local, name, kind=kind)

    def add_nodes(self, a, b, name=""):
        if self.nodes[a].shape != self.nodes[b].shape:
            raise ShapeError(f"cannot add shapes {self.nodes[a].shape} and {self.nodes[b].shape}")
        local = self.nodes[a].local and self.nodes[b].local
        return self.add("add", (a, b), self.nodes[a].shape, local, name)

    def bilinear(self, x, y, spec, name=""):
        xi, yi, zi = split_spec(spec)
        sizes: dict[str, int] = {}
        for idx, node in ((xi, self.nodes[x]), (yi, self.nodes[y])):
            if len(idx) != len(node.shape):
                raise ShapeError(f"spec {spec} does not match operand shape {node.shape}")
            for label, size in zip(idx, node.shape):
                if sizes.setdefault(label, size) != size:
                    raise ShapeError(f"label {label} has inconsistent sizes in {spec}")
        shape = tuple(sizes[c] for c in zi)
        # position-local when all three index strings share a leading position label
        local = (
            self.nodes[x].local and self.nodes[y].local and xi[0] == yi[0] == zi[0]
        )
        return self.add("bilinear", (x, y), shape, local, name, spec=spec)

    def reshape(self, x, shape, name=""):
        src = self.nodes[x]
        if int(np.prod(shape)) != src.size:
            raise ShapeError(f"cannot reshape {src.shape} to {shape}")
        local = src.local and shape[0] == src.shape[0]
        return self.add("reshape", (x,), shape, local, name)

    # -------------------------------------------------------------- queries

    def op_counts(self) -> Counter:
        tags = Counter()
        for node in self.nodes:
            tags[node.params.get("kind", node.op) if node.op == "unary" else node.op] += 1
        return tags

    def children(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for i, node in enumerate(self.nodes):
            for p in node.parents:
                out[p].append(i)
        return out

    def input_ids(self) -> list[int]:
        return [i for i, node in enumerate(self.nodes) if node.op == "input"]

    # -------------------------------------------------------------- evaluation

    def evaluate(self, inputs, upto: int | None = None) -> list[np.ndarray]:
        """Exact values of every node for a batch of inputs.

        ``inputs`` is a single array of shape ``(B, *input_shape)`` (or without
        the batch axis) for single-input programs, or a dict mapping input
        node ids to such arrays.
        """
        ids = self.input_ids()
        if not isinstance(inputs, dict):
            inputs = {ids[0]: inputs}
        first = np.asarray(inputs[ids[0]], dtype=np.float64)
        squeeze = first.ndim == len(self.nodes[ids[0]].shape)
        values: list[np.ndarray] = []
        stop = len(self.nodes) if upto is None else upto + 1
        for i in range(stop):
            node = self.nodes[i]
            if node.op == "input":
                v = np.asarray(inputs[i], dtype=np.float64)
                values.append(v[None] if squeeze else v)
            else:
                values.append(eval_node(node, [values[p] for p in node.parents]))
        if squeeze:
            values = [v[0] for v in values]
        return values

    def interval_step(self, i: int, parent_ivs: list[IntervalBounds]) -> IntervalBounds:
        return ibp_node(self.nodes[i], parent_ivs)

    # -------------------------------------------------------------- transformation

    def expand_attention(self) -> "Program":
        """Copy with every attention node replaced by its primitive sub-graph."""
        out = Program()
        out.meta = dict(self.meta)
        remap: dict[int, int] = {}
        for i, node in enumerate(self.nodes):
            parents = tuple(remap[p] for p in node.parents)
            if node.op == "attention":
                sub = node.params["sub"]
                local_map: dict[int, int] = {}
                placeholders = sub.input_ids()
                for ph, parent in zip(placeholders, parents):
                    local_map[ph] = parent
                for j, sn in enumerate(sub.nodes):
                    if sn.op == "input":
                        continue
                    local_map[j] = out.add(
                        sn.op, tuple(local_map[p] for p in sn.parents), sn.shape, sn.local,
                        f"{node.name}.{sn.name}", **sn.params,
                    )
                remap[i] = local_map[sub.output]
            else:
                remap[i] = out.add(node.op, parents, node.shape, node.local, node.name, **node.params)
        out.output = remap[self.output]
        return out


# ---------------------------------------------------------------- per-op kernels


def _bilinear_eval(spec: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xi, yi, zi = split_spec(spec)
    return np.einsum(f"...{xi},...{yi}->...{zi}", x, y)


def eval_node(node: Node, args: list[np.ndarray]) -> np.ndarray:
    """Batched exact evaluation; every argument has a leading batch axis."""
    op = node.op
    if op == "affine":
        out = args[0] @ node.params["W"].T
        b = node.params["b"]
        return out if b is None else out + b
    if op == "add":
        return args[0] + args[1]
    if op == "unary":
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            return UNARY_EVAL[node.params["kind"]](args[0])
    if op == "bilinear":
        return _bilinear_eval(node.params["spec"], args[0], args[1])
    if op == "reshape":
        return args[0].reshape(args[0].shape[:1] + node.shape)
    if op == "pool":
        return args[0].mean(axis=1, keepdims=True)
    if op == "attention":
        sub: Program = node.params["sub"]
        ids = sub.input_ids()
        vals = sub.evaluate(dict(zip(ids, args)))
        return vals[sub.output]
    raise UnsupportedShape(f"cannot evaluate op {op!r}")


def ibp_node(node: Node, ivs: list[IntervalBounds]) -> IntervalBounds:
    """Interval image of a node given intervals of its parents.

    Nodes carrying a ``clip`` range (known bounds on every reachable value,
    e.g. probabilities) are intersected with it.
    """
    iv = _ibp_image(node, ivs)
    clip = node.params.get("clip")
    if clip is not None:
        iv = iv.intersect(IntervalBounds(np.full(iv.shape, clip[0]), np.full(iv.shape, clip[1])))
    return iv


def _ibp_image(node: Node, ivs: list[IntervalBounds]) -> IntervalBounds:
    op = node.op
    if op == "affine":
        return ibp_affine(ivs[0], node.params["W"], node.params["b"])
    if op == "add":
        return ibp_add(ivs[0], ivs[1])
    if op == "unary":
        return ibp_elementwise(ivs[0], node.params["kind"])
    if op == "bilinear":
        return ibp_bilinear(ivs[0], ivs[1], node.params["spec"])
    if op == "reshape":
        return ivs[0].reshape(node.shape)
    if op == "pool":
        return IntervalBounds(ivs[0].lower.mean(axis=0, keepdims=True),
                              ivs[0].upper.mean(axis=0, keepdims=True))
    if op == "attention":
        sub: Program = node.params["sub"]
        cur: dict[int, IntervalBounds] = dict(zip(sub.input_ids(), ivs))
        for j, sn in enumerate(sub.nodes):
            if sn.op != "input":
                cur[j] = ibp_node(sn, [cur[p] for p in sn.parents])
        return cur[sub.output]
    raise UnsupportedShape(f"no interval rule for op {op!r}")


# ---------------------------------------------------------------- compilation


def attention_subprogram(n: int, heads: int, d_head: int) -> Program:
    """Primitive graph of multi-head attention with inputs q, k, v of shape [n, H*dh].

    Scores are not rescaled here; the 1/sqrt(dh) factor is folded into the
    query projection.
    """
    d = heads * d_head
    sub = Program()
    q = sub.add("input", (), (n, d), name="q")
    k = sub.add("input", (), (n, d), name="k")
    v = sub.add("input", (), (n, d), name="v")
    qh = sub.reshape(q, (n, heads, d_head), name="q_heads")
    kh = sub.reshape(k, (n, heads, d_head), name="k_heads")
    vh = sub.reshape(v, (n, heads, d_head), name="v_heads")
    s = sub.bilinear(qh, kh, "ihe,jhe->hij", name="scores")
    if n == 1:
        # softmax over a single key is identically one
        prob = sub.affine(s, np.zeros((1, 1)), np.ones(1), name="probs")
    else:
        e = sub.unary(s, "exp", name="exp")
        z = sub.affine(e, np.ones((1, n)), None, name="exp_sum")
        r = sub.unary(z, "reciprocal", name="inv_sum")
        prob = sub.bilinear(e, r, "hij,hiz->hij", name="probs")
        sub[prob].params["clip"] = (0.0, 1.0)
    o = sub.bilinear(prob, vh, "hij,jhe->ihe", name="weighted")
    sub.output = sub.reshape(o, (n, d), name="concat")
    return sub


def _layer_norm(prog: Program, x: int, ln, name: str) -> int:
    d = prog[x].shape[-1]
    center = np.eye(d) - np.full((d, d), 1.0 / d)
    if ln.mode == "none":
        return x
    if ln.mode == "modified":
        return prog.affine(x, np.diag(ln.weight) @ center, ln.bias, name=name)
    c = prog.affine(x, center, None, name=f"{name}.center")
    sq = prog.unary(c, "square", name=f"{name}.square")
    var = prog.affine(sq, np.full((1, d), 1.0 / d), np.array([ln.eps]), name=f"{name}.var")
    sd = prog.unary(var, "sqrt", name=f"{name}.std")
    inv = prog.unary(sd, "reciprocal", name=f"{name}.inv_std")
    normed = prog.bilinear(c, inv, "nd,nz->nd", name=f"{name}.normalize")
    return prog.affine(normed, np.diag(ln.weight), ln.bias, name=name)


def compile_model(model: TransformerModel, n: int, label: int | None = None) -> Program:
    """Lower ``model`` for sequences of length ``n``.

    With ``label`` the output node holds the K-1 margins ``y_label - y_j``;
    otherwise it holds the logits.
    """
    hp = model.hyper
    if not 1 <= n <= hp.max_len:
        raise UnsupportedShape(f"sequence length {n} outside [1, {hp.max_len}]")
    d, H, dh = hp.d_model, hp.num_heads, hp.d_head
    prog = Program()
    prog.meta = {"n": n, "d": d, "label": label, "layers": hp.num_layers}
    x = prog.add("input", (), (n, d), name="embeddings")
    h = prog.affine(x, np.eye(d), model.pos_enc[:n], name="embed")
    scale = 1.0 / np.sqrt(dh)
    for li, layer in enumerate(model.layers):
        tag = f"layer{li}"
        q = prog.affine(h, layer.wq * scale, layer.bq * scale, name=f"{tag}.q")
        k = prog.affine(h, layer.wk, layer.bk, name=f"{tag}.k")
        v = prog.affine(h, layer.wv, layer.bv, name=f"{tag}.v")
        att = prog.add("attention", (q, k, v), (n, d), True, f"{tag}.attn",
                       heads=H, sub=attention_subprogram(n, H, dh))
        o = prog.affine(att, layer.wo, layer.bo, name=f"{tag}.out")
        r1 = prog.add_nodes(h, o, name=f"{tag}.res1")
        h1 = _layer_norm(prog, r1, layer.ln1, f"{tag}.ln1")
        f1 = prog.affine(h1, layer.w1, layer.b1, name=f"{tag}.ffn1")
        a1 = prog.unary(f1, "relu", name=f"{tag}.relu")
        f2 = prog.affine(a1, layer.w2, layer.b2, name=f"{tag}.ffn2")
        r2 = prog.add_nodes(h1, f2, name=f"{tag}.res2")
        h = _layer_norm(prog, r2, layer.ln2, f"{tag}.ln2")
    pooled = prog.add("pool", (h,), (1, d), False, "pool")
    if label is None:
        prog.output = prog.affine(pooled, model.head_w, model.head_b, name="logits")
    else:
        C = margin_matrix(hp.num_classes, label)
        prog.output = prog.affine(pooled, C @ model.head_w, C @ model.head_b, name="margin")
    return prog
