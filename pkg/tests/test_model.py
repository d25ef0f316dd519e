import json

import numpy as np
import pytest

from certiformer.errors import ShapeError, UnknownToken
from certiformer.io import generate_planted_fixture
from certiformer.model import (
    Hyper,
    expected_shapes,
    forward_eval,
    input_gradients,
    margin_matrix,
    predict,
)
from conftest import DATA, make_model
from helpers import linear_model, with_head


def test_hyper_validation():
    with pytest.raises(ShapeError):
        Hyper(num_heads=3, d_model=8)
    with pytest.raises(ShapeError):
        Hyper(num_classes=1)
    with pytest.raises(ValueError):
        Hyper(layernorm_mode="batch")
    assert Hyper(num_heads=2, d_model=8).d_head == 4


def test_zero_head_gives_bias():
    m = with_head(make_model(3), np.zeros((2, 8)), [0.3, -0.2])
    assert np.allclose(forward_eval(m, [1, 2, 3]), [0.3, -0.2])


def test_single_position_attention_is_one():
    m = make_model(4, heads=1)
    _, acts = forward_eval(m, [5], return_activations=True)
    assert np.all(acts["layer0.probs"] == 1.0)


def test_golden_logits(fixture42):
    golden = json.loads((DATA / "golden42.json").read_text())
    for case in golden["cases"]:
        assert np.allclose(forward_eval(fixture42, case["token_ids"]), case["logits"], atol=1e-12, rtol=0)


def test_embeddings_errors(fixture42):
    with pytest.raises(UnknownToken):
        fixture42.embeddings([64])
    with pytest.raises(ShapeError):
        fixture42.embeddings([])
    with pytest.raises(ShapeError):
        fixture42.embeddings([1] * 33)


def test_margin_matrix():
    m = margin_matrix(3, 1)
    assert m.tolist() == [[-1.0, 1.0, 0.0], [0.0, 1.0, -1.0]]


def test_expected_shapes_cover_layers():
    shapes = expected_shapes(Hyper(num_layers=2, num_heads=2, d_model=8, d_ff=16))
    assert shapes["layers.1.wq"] == (8, 8) and shapes["layers.1.w1"] == (16, 8)
    assert shapes["head.weight"] == (2, 8)


def test_predict_matches_argmax(fixture42):
    ids = [3, 1, 4, 1, 5]
    assert predict(fixture42, ids) == int(np.argmax(forward_eval(fixture42, ids)))


def test_gradient_matches_affine_row_norms():
    m = linear_model(1)
    ids = [2, 3, 4]
    g = input_gradients(m, ids)
    expected = np.linalg.norm(m.head_w[0] - m.head_w[1]) / 3
    assert np.allclose(g, expected, atol=1e-5)
    m0 = with_head(m, np.zeros_like(m.head_w), [1.0, 0.0])
    assert np.allclose(input_gradients(m0, ids), 0.0, atol=1e-9)


def test_gradient_of_ignored_position_is_zero():
    fx = generate_planted_fixture(0)
    g = input_gradients(fx.model, fx.token_ids)
    assert g[fx.silent - 1] < 1e-6
    assert np.argmax(g) == fx.dominant - 1


def test_gradient_central_difference_order():
    m = make_model(5)
    ids = [1, 2, 3, 4]
    g1 = input_gradients(m, ids, h=1e-3)
    g2 = input_gradients(m, ids, h=5e-4)
    g3 = input_gradients(m, ids, h=2.5e-4)
    # O(h^2): successive differences shrink by about 4x
    d1, d2 = np.abs(g1 - g2).max(), np.abs(g2 - g3).max()
    assert d2 < 0.5 * d1 or d1 < 1e-9


@pytest.mark.parametrize("mode", ["standard", "modified", "none"])
def test_batched_forward_matches_single(mode):
    from certiformer.model import forward_embeddings
    m = make_model(6, ln=mode)
    ids = np.array([[1, 2, 3], [4, 5, 6]])
    batch = forward_embeddings(m, m.embed[ids])
    for row, logits in zip(ids, batch):
        assert np.allclose(logits, forward_eval(m, row))
