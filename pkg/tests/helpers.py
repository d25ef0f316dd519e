"""Hand-built models for constructed-oracle tests."""
from dataclasses import replace

import numpy as np

from certiformer.model import Hyper, LayerNormParams, TransformerLayer, TransformerModel


def zero_layer(d, f, mode="none"):
    z = np.zeros
    ln = LayerNormParams(np.ones(d), z(d), mode)
    return TransformerLayer(z((d, d)), z(d), z((d, d)), z(d), z((d, d)), z(d), z((d, d)), z(d),
                            ln, z((f, d)), z(f), z((d, f)), z(d), ln)


def linear_model(seed=0, n_vocab=10, d=4, f=4, classes=2, head_b=None):
    """Logits = head_w @ mean(x + pos) + head_b: attention, FFN and LN all bypassed."""
    rng = np.random.default_rng(seed)
    hp = Hyper(1, 1, d, f, 8, n_vocab, classes, "none")
    head_w = rng.normal(size=(classes, d))
    hb = np.zeros(classes) if head_b is None else np.asarray(head_b, float)
    return TransformerModel(hp, rng.normal(size=(n_vocab, d)), rng.normal(size=(8, d)) * 0.1,
                            [zero_layer(d, f)], head_w, hb)


def with_head(model, head_w, head_b):
    return replace(model, head_w=np.asarray(head_w, float), head_b=np.asarray(head_b, float))
