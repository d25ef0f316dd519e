"""Seeded models and inputs shared by the experiment drivers."""
import numpy as np

from certiformer.io import generate_fixture
from certiformer.model import Hyper


def instance(seed, layers=None, heads=None, d=None, n=None, ln="modified"):
    rng = np.random.default_rng(seed)
    layers = layers or int(rng.choice([1, 2, 3]))
    heads = heads or int(rng.choice([1, 2, 4]))
    d = d or int(rng.choice([8, 16]))
    n = n or int(rng.integers(4, 17))
    model, _ = generate_fixture(10_000 + seed, Hyper(layers, heads, d, 2 * d, 32, 64, 2, ln))
    return model, [int(i) for i in rng.integers(1, 64, size=n)]


def fmt(x):
    return "inf" if not np.isfinite(x) else f"{x:.4g}"
