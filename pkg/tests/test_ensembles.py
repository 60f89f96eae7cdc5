"""Combinator semantics for the score-fusion strategies.

Every combinator returns a plain predictor; the tests recompute each
fusion directly in numpy over randomized instances and compare.
"""

import numpy as np
import pytest

from fabricnet import ensembles as E
from fabricnet.errors import ShapeError, ValidationError


def const_sub(value):
    """Sub-predictor emitting a fixed column of scores."""
    def predict(features):
        n = np.asarray(features).shape[0]
        return np.full((n, 1), value, dtype=np.float64)
    return predict


class CountingHead:
    def __init__(self):
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return np.asarray(x, dtype=np.float64)


# ------------------------------------------------------------- stacking

def test_stacked_applies_final_to_concatenated_scores():
    subs = [const_sub(0.2), const_sub(0.7), const_sub(0.4)]
    stacked = E.stacked_ensemble(subs, lambda s: s * 2.0)
    out = stacked(np.zeros((3, 5)))
    np.testing.assert_allclose(out, np.tile([0.4, 1.4, 0.8], (3, 1)))


def test_stacked_identity_final_recovers_scores():
    rng = np.random.default_rng(0)
    for _ in range(100):
        cols = rng.uniform(size=(4, 3))
        subs = [lambda f, c=cols[:, j]: c.reshape(-1, 1) for j in range(3)]
        stacked = E.stacked_ensemble(subs, lambda s: s)
        np.testing.assert_allclose(stacked(np.zeros((4, 2))), cols)


# ------------------------------------------------------- weighted average

def test_weight_average_toy_example():
    # weights (2, 1) over per-model score vectors (1, 0) and (0, 1)
    subs = [lambda f: np.array([1.0, 0.0]), lambda f: np.array([0.0, 1.0])]
    pick = E.weight_average_ensemble(subs, [2.0, 1.0])
    assert pick(np.zeros(3)) == 0


def test_weight_average_matches_numpy_over_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(100):
        k, c = int(rng.integers(2, 5)), int(rng.integers(2, 6))
        scores = rng.uniform(size=(k, c))
        w = rng.uniform(0.1, 2.0, size=k)
        subs = [lambda f, s=scores[i]: s for i in range(k)]
        pick = E.weight_average_ensemble(subs, w)
        want = int(np.argmax(w @ scores))
        assert pick(np.zeros(2)) == want


def test_weight_average_tie_takes_lowest_index():
    subs = [lambda f: np.array([0.5, 0.5])]
    assert E.weight_average_ensemble(subs, [1.0])(np.zeros(1)) == 0


@pytest.mark.parametrize("w", [[1.0], [1.0, 2.0, 3.0]])
def test_weight_average_requires_one_weight_per_model(w):
    subs = [lambda f: np.array([1.0]), lambda f: np.array([0.0])]
    with pytest.raises(ValidationError):
        E.weight_average_ensemble(subs, w)


def test_weight_average_rejects_non_finite_weights():
    subs = [lambda f: np.array([1.0]), lambda f: np.array([0.0])]
    with pytest.raises(ValidationError):
        E.weight_average_ensemble(subs, [1.0, np.nan])


# ------------------------------------------------------------ class-based

def test_class_based_toy_example():
    subs = [lambda f: np.array([0.1]), lambda f: np.array([0.9]), lambda f: np.array([0.3])]
    assert E.class_based_ensemble(subs)(np.zeros(4)) == 1


def test_class_based_single_model_returns_zero():
    assert E.class_based_ensemble([lambda f: np.array([0.9])])(np.zeros(2)) == 0


def test_class_based_tie_takes_lowest_index():
    subs = [lambda f: np.array([0.2]), lambda f: np.array([0.2])]
    assert E.class_based_ensemble(subs)(np.zeros(2)) == 0


def test_class_based_invariant_to_monotone_rescale():
    rng = np.random.default_rng(2)
    for _ in range(100):
        vals = rng.uniform(size=4)
        subs = [lambda f, v=v: np.array([v]) for v in vals]
        base = E.class_based_ensemble(subs)(np.zeros(1))
        scaled = [lambda f, v=v: np.array([0.5 * v + 0.2]) for v in vals]
        assert E.class_based_ensemble(scaled)(np.zeros(1)) == base
        assert base == int(np.argmax(vals))


def test_class_based_rejects_vector_scores():
    subs = [lambda f: np.array([0.1, 0.2])]
    with pytest.raises(ShapeError):
        E.class_based_ensemble(subs)(np.zeros(1))


# --------------------------------------------------- full fused predictor

def test_fabricnet_predict_thresholds_scores():
    head = CountingHead()
    subs = [const_sub(0.5), const_sub(0.3), const_sub(0.91)]
    binary, scores = E.fabricnet_predict(head, subs, np.zeros((2, 4)), threshold=0.5)
    assert binary.dtype == np.uint8
    np.testing.assert_array_equal(binary, np.tile([1, 0, 1], (2, 1)))
    np.testing.assert_allclose(scores, np.tile([0.5, 0.3, 0.91], (2, 1)))


def test_fabricnet_predict_calls_head_exactly_once():
    head = CountingHead()
    subs = [const_sub(0.4) for _ in range(5)]
    E.fabricnet_predict(head, subs, np.zeros((3, 2)), threshold=0.5)
    assert head.calls == 1


def test_fabricnet_predict_matches_manual_fusion():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, c = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        table = rng.uniform(size=(n, c))
        t = float(rng.uniform(0.2, 0.8))
        subs = [lambda f, col=table[:, j]: col.reshape(-1, 1) for j in range(c)]
        binary, scores = E.fabricnet_predict(lambda x: x, subs, np.zeros((n, 2)), threshold=t)
        np.testing.assert_allclose(scores, table)
        np.testing.assert_array_equal(binary, (table >= t).astype(np.uint8))


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
def test_fabricnet_predict_rejects_degenerate_threshold(t):
    subs = [const_sub(0.5)]
    with pytest.raises(ValidationError):
        E.fabricnet_predict(lambda x: x, subs, np.zeros((1, 2)), threshold=t)


def test_fabricnet_classify_picks_best_scoring_class():
    subs = [const_sub(0.2), const_sub(0.8), const_sub(0.5)]
    head = CountingHead()
    got = E.fabricnet_classify(head, subs, np.zeros((4, 3)))
    np.testing.assert_array_equal(got, np.ones(4, dtype=np.int64))
    assert head.calls == 1


def test_fabricnet_classify_matches_manual_argmax():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        table = rng.uniform(size=(n, c))
        subs = [lambda f, col=table[:, j]: col.reshape(-1, 1) for j in range(c)]
        got = E.fabricnet_classify(lambda x: x, subs, np.zeros((n, 2)))
        np.testing.assert_array_equal(got, np.argmax(table, axis=1))


def test_fabricnet_predict_rejects_ragged_sub_outputs():
    subs = [lambda f: np.zeros((2, 1)), lambda f: np.zeros((3, 1))]
    with pytest.raises(ShapeError):
        E.fabricnet_predict(lambda x: x, subs, np.zeros((2, 2)), threshold=0.5)
