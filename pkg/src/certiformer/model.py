"""Transformer classifier definition and direct reference inference.

Architecture (post-LN, mean pooling)::

    h = embed[ids] + pos_enc[:n]
    for each layer:
        h = LN1(h + Wo . MultiHeadAttention(h))
        h = LN2(h + W2 . relu(W1 h + b1) + b2)
    logits = head_w . mean_i(h_i) + head_b

Weights follow the ``y = W x + b`` convention (W is [out, in]).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UnknownToken

LN_MODES = ("standard", "modified", "none")


@dataclass(frozen=True)
class Hyper:
    num_layers: int = 1
    num_heads: int = 1
    d_model: int = 8
    d_ff: int = 16
    max_len: int = 32
    vocab_size: int = 64
    num_classes: int = 2
    layernorm_mode: str = "modified"
    layernorm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ShapeError(f"d_model={self.d_model} not divisible by heads={self.num_heads}")
        if self.num_classes < 2:
            raise ShapeError("need at least two classes")
        if self.layernorm_mode not in LN_MODES:
            raise ValueError(f"layernorm_mode must be one of {LN_MODES}")
        if self.layernorm_mode == "standard" and not self.layernorm_eps > 0:
            raise ValueError("standard layer norm needs a positive smoothing constant")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads


@dataclass(frozen=True)
class LayerNormParams:
    weight: np.ndarray
    bias: np.ndarray
    mode: str = "modified"
    eps: float = 1e-5

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.mode == "none":
            return x
        centered = x - x.mean(axis=-1, keepdims=True)
        if self.mode == "standard":
            centered = centered / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + self.eps)
        return centered * self.weight + self.bias


@dataclass(frozen=True)
class TransformerLayer:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln1: LayerNormParams
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    ln2: LayerNormParams


@dataclass(frozen=True)
class TransformerModel:
    hyper: Hyper
    embed: np.ndarray
    pos_enc: np.ndarray
    layers: tuple[TransformerLayer, ...]
    head_w: np.ndarray
    head_b: np.ndarray
    pooling: str = "mean"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate_model(self)

    def embeddings(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=int)
        if ids.ndim != 1 or ids.size == 0:
            raise ShapeError("token_ids must be a non-empty 1-d sequence")
        if np.any(ids < 0) or np.any(ids >= self.embed.shape[0]):
            bad = ids[(ids < 0) | (ids >= self.embed.shape[0])][0]
            raise UnknownToken(f"token id {bad} outside vocabulary of {self.embed.shape[0]}")
        if ids.size > self.hyper.max_len:
            raise ShapeError(f"sequence length {ids.size} exceeds max_len {self.hyper.max_len}")
        return self.embed[ids].copy()


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def layer_tensors(layer: TransformerLayer) -> dict[str, np.ndarray]:
    return {
        "wq": layer.wq, "bq": layer.bq, "wk": layer.wk, "bk": layer.bk,
        "wv": layer.wv, "bv": layer.bv, "wo": layer.wo, "bo": layer.bo,
        "ln1.weight": layer.ln1.weight, "ln1.bias": layer.ln1.bias,
        "w1": layer.w1, "b1": layer.b1, "w2": layer.w2, "b2": layer.b2,
        "ln2.weight": layer.ln2.weight, "ln2.bias": layer.ln2.bias,
    }


def expected_shapes(hyper: Hyper) -> dict[str, tuple[int, ...]]:
    d, f = hyper.d_model, hyper.d_ff
    shapes = {"embed": (hyper.vocab_size, d), "pos_enc": (hyper.max_len, d)}
    per_layer = {
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,), "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,), "ln1.weight": (d,), "ln1.bias": (d,),
        "w1": (f, d), "b1": (f,), "w2": (d, f), "b2": (d,),
        "ln2.weight": (d,), "ln2.bias": (d,),
    }
    for i in range(hyper.num_layers):
        for name, shape in per_layer.items():
            shapes[f"layers.{i}.{name}"] = shape
    shapes["head.weight"] = (hyper.num_classes, d)
    shapes["head.bias"] = (hyper.num_classes,)
    return shapes


def model_tensors(model: TransformerModel) -> dict[str, np.ndarray]:
    tensors = {"embed": model.embed, "pos_enc": model.pos_enc}
    for i, layer in enumerate(model.layers):
        for name, arr in layer_tensors(layer).items():
            tensors[f"layers.{i}.{name}"] = arr
    tensors["head.weight"] = model.head_w
    tensors["head.bias"] = model.head_b
    return tensors


def validate_model(model: TransformerModel) -> None:
    if len(model.layers) != model.hyper.num_layers:
        raise ShapeError(f"expected {model.hyper.num_layers} layers, got {len(model.layers)}")
    if model.pooling != "mean":
        raise ShapeError(f"unsupported pooling {model.pooling!r}")
    expected = expected_shapes(model.hyper)
    for name, arr in model_tensors(model).items():
        if np.shape(arr) != expected[name]:
            raise ShapeError(f"tensor {name} has shape {np.shape(arr)}, expected {expected[name]}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError(f"tensor {name} contains non-finite values")
    for layer in model.layers:
        for ln in (layer.ln1, layer.ln2):
            if ln.mode != model.hyper.layernorm_mode:
                raise ShapeError("layer norm mode disagrees with hyperparameters")


# ---------------------------------------------------------------------- inference


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def pooled_features(model: TransformerModel, x: np.ndarray, activations: dict | None = None):
    """Mean-pooled final representation for embedded inputs ``x`` of shape (..., n, d)."""
    x = np.asarray(x, dtype=np.float64)
    hp = model.hyper
    n = x.shape[-2]
    h = x + model.pos_enc[:n]
    lead = h.shape[:-2]
    for li, layer in enumerate(model.layers):
        q = (h @ layer.wq.T + layer.bq).reshape(lead + (n, hp.num_heads, hp.d_head))
        k = (h @ layer.wk.T + layer.bk).reshape(lead + (n, hp.num_heads, hp.d_head))
        v = (h @ layer.wv.T + layer.bv).reshape(lead + (n, hp.num_heads, hp.d_head))
        q, k, v = (np.swapaxes(a, -2, -3) for a in (q, k, v))  # (..., h, n, e)
        scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(hp.d_head)
        probs = _softmax(scores)
        attn = np.swapaxes(probs @ v, -2, -3).reshape(lead + (n, hp.d_model))
        h = layer.ln1(h + attn @ layer.wo.T + layer.bo)
        if activations is not None:
            activations[f"layer{li}.probs"] = probs
            activations[f"layer{li}.attn"] = attn
            activations[f"layer{li}.ln1"] = h
        hidden = np.maximum(h @ layer.w1.T + layer.b1, 0.0)
        h = layer.ln2(h + hidden @ layer.w2.T + layer.b2)
        if activations is not None:
            activations[f"layer{li}.ln2"] = h
    return h.mean(axis=-2)


def forward_embeddings(model: TransformerModel, x: np.ndarray, activations: dict | None = None):
    """Logits for embedded inputs ``x`` of shape (..., n, d)."""
    return pooled_features(model, x, activations) @ model.head_w.T + model.head_b


def forward_eval(model: TransformerModel, token_ids, return_activations: bool = False):
    """Deterministic logits for a token sequence (optionally with activations)."""
    x = model.embeddings(token_ids)
    acts: dict | None = {} if return_activations else None
    logits = forward_embeddings(model, x, acts)
    if return_activations:
        return logits, acts
    return logits


def predict(model: TransformerModel, token_ids) -> int:
    return int(np.argmax(forward_eval(model, token_ids)))


def margin_matrix(num_classes: int, label: int) -> np.ndarray:
    """Rows e_label - e_y for every y != label."""
    rows = []
    for y in range(num_classes):
        if y != label:
            row = np.zeros(num_classes)
            row[label], row[y] = 1.0, -1.0
            rows.append(row)
    return np.array(rows)


def input_gradients(model: TransformerModel, token_ids, class_pair=None, h: float = 1e-4) -> np.ndarray:
    """Per-position l2 norms of d(y_c - y_other)/dx_i by central differences.

    ``class_pair`` is ``(c, other)``; by default c is the predicted class and
    other is the runner-up.
    """
    x0 = model.embeddings(token_ids)
    n, d = x0.shape
    logits = forward_embeddings(model, x0)
    if class_pair is None:
        order = np.argsort(-logits, kind="stable")
        class_pair = (int(order[0]), int(order[1]))
    c, other = class_pair
    # batch of 2*n*d perturbed copies: +h then -h along each coordinate
    eye = np.eye(n * d).reshape(n * d, n, d) * h
    batch = np.concatenate([x0 + eye, x0 - eye])
    out = forward_embeddings(model, batch)
    margin = out[:, c] - out[:, other]
    grad = (margin[: n * d] - margin[n * d:]) / (2 * h)
    return np.linalg.norm(grad.reshape(n, d), axis=1)
