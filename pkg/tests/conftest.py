import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from certiformer.io import generate_fixture, load_model, load_vocab
from certiformer.model import Hyper

DATA = Path(__file__).parent / "data"

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_model(seed=0, layers=1, heads=2, d=8, ff=16, ln="modified", classes=2, vocab=64):
    hp = Hyper(num_layers=layers, num_heads=heads, d_model=d, d_ff=ff, max_len=32,
               vocab_size=vocab, num_classes=classes, layernorm_mode=ln)
    model, _ = generate_fixture(seed, hp)
    return model


@pytest.fixture(scope="session")
def fixture42():
    return load_model(DATA / "fixture42")


@pytest.fixture(scope="session")
def vocab42():
    return load_vocab(DATA / "fixture42" / "vocab.tsv")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
