import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efts.errors import ConfigError
from efts.evalhead import (center_normalize, evaluate, fit_logistic, lr_head_fit_predict,
                           nearest_centroid_predict, summarize)
from efts.numcore import init_encoder
from efts.synthdata import DatasetSpec, generate_dataset


def test_center_normalize_single_support_row():
    s, q = center_normalize(np.array([[3.0, 4.0]]), np.array([[1.0, 1.0], [3.0, 4.0]]))
    assert np.array_equal(s, np.zeros((1, 2)))
    assert np.array_equal(q[1], np.zeros(2))
    assert np.linalg.norm(q[0]) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-100, 100))
def test_center_normalize_unit_rows_and_translation(seed, shift):
    rng = np.random.default_rng(seed)
    s, q = rng.normal(size=(6, 4)), rng.normal(size=(9, 4))
    a_s, a_q = center_normalize(s, q)
    for row in np.concatenate([a_s, a_q]):
        n = np.linalg.norm(row)
        assert n == 0.0 or abs(n - 1.0) < 1e-12
    b_s, b_q = center_normalize(s + shift, q + shift)
    np.testing.assert_allclose(b_s, a_s, atol=1e-9)
    np.testing.assert_allclose(b_q, a_q, atol=1e-9)


def test_nearest_centroid_basics():
    support = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    labels = np.array([0, 1, 2])
    assert list(nearest_centroid_predict(support, labels, support)) == [0, 1, 2]
    tie = np.array([[0.5, 0.5]])  # equidistant from classes 0 and 1
    assert list(nearest_centroid_predict(support[:2], labels[:2], tie)) == [0]


def test_nearest_centroid_matches_distance_table():
    rng = np.random.default_rng(0)
    support = rng.normal(size=(25, 6))
    labels = np.repeat(np.arange(5), 5)
    query = rng.normal(size=(30, 6))
    pred = nearest_centroid_predict(support, labels, query)
    for i, x in enumerate(query):
        best, best_d = None, None
        for c in range(5):
            cen = [sum(support[j][d] for j in range(25) if labels[j] == c) / 5 for d in range(6)]
            dist = sum((x[d] - cen[d]) ** 2 for d in range(6))
            if best_d is None or dist < best_d:
                best, best_d = c, dist
        assert pred[i] == best


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_nearest_centroid_label_permutation(seed):
    rng = np.random.default_rng(seed)
    support = rng.normal(size=(12, 3))
    labels = np.repeat(np.arange(4), 3)
    query = rng.normal(size=(7, 3))
    perm = rng.permutation(4)
    base = nearest_centroid_predict(support, labels, query)
    moved = nearest_centroid_predict(support, perm[labels], query)
    assert np.array_equal(moved, perm[base])


def test_lr_head_first_step_direction():
    support = np.array([[-2.0], [-1.0], [1.0], [3.0]])
    labels = np.array([0, 0, 1, 1])
    pred = lr_head_fit_predict(support, labels, np.array([[-5.0], [5.0]]), steps=1, lr=0.01)
    assert list(pred) == [0, 1]


def test_lr_head_symmetric_tie():
    support = np.array([[1.0, 0.0], [1.0, 0.0]])
    pred = lr_head_fit_predict(support, np.array([0, 1]), np.array([[1.0, 0.0]]), steps=50)
    assert list(pred) == [0]


def test_lr_head_loss_non_increasing():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = np.repeat(np.arange(5), 2)
    _, _, hist = fit_logistic(x, y, steps=100, lr=0.01)
    assert len(hist) == 101
    assert all(b < a for a, b in zip(hist, hist[1:]))
    with pytest.raises(ConfigError):
        fit_logistic(x, y, steps=0)


def test_summarize_ci():
    rep = summarize("protonet", 5, 1, 15, [0.4])
    assert rep.ci95 == 0.0 and rep.accuracy == pytest.approx(40.0)
    rep = summarize("protonet", 5, 1, 15, [0.2, 0.4, 0.6, 0.8])
    acc = np.array([20, 40, 60, 80.0])
    assert rep.ci95 == pytest.approx(1.96 * acc.std() / 2)
    assert json.loads(rep.to_json())["episodes"] == 4
    assert "50.00 ± " in rep.row()


@pytest.fixture(scope="module")
def flat_data():
    return generate_dataset(DatasetSpec(sigma_sep=0.0), 11)


def test_chance_level_on_inseparable_data(flat_data):
    enc = init_encoder((16, 64, 64, 32), np.random.default_rng(0))
    rep = evaluate(enc, flat_data, "novel", "protonet", 500, 5, 1, 15, np.random.default_rng(1))
    assert abs(rep.accuracy - 20.0) <= 3.0


def test_evaluate_determinism_and_lr_head(flat_data):
    enc = init_encoder((16, 8, 4), np.random.default_rng(0))
    a = evaluate(enc, flat_data, "novel", "lr", 5, 5, 1, 3, np.random.default_rng(2))
    b = evaluate(enc, flat_data, "novel", "lr", 5, 5, 1, 3, np.random.default_rng(2))
    assert a == b and 0 <= a.accuracy <= 100
    one = evaluate(enc, flat_data, "novel", "protonet", 1, 5, 1, 3, np.random.default_rng(2))
    assert one.ci95 == 0.0
    with pytest.raises(ConfigError):
        evaluate(enc, flat_data, head="knn")


def test_ci_shrinks_with_more_episodes():
    ds = generate_dataset(DatasetSpec(), 5)
    enc = init_encoder((16, 32, 16), np.random.default_rng(0))
    small = [evaluate(enc, ds, "novel", "protonet", 50, 5, 1, 5, np.random.default_rng(s)).ci95 for s in range(5)]
    large = [evaluate(enc, ds, "novel", "protonet", 100, 5, 1, 5, np.random.default_rng(s)).ci95 for s in range(5)]
    assert np.mean(large) < np.mean(small)
