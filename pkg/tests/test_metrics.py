"""Multi-label metric computations checked against independent oracles.

Precision/recall/F1 are cross-checked with scikit-learn's micro
averaging, the fixed-grid AUC against the rank-statistic (Mann-Whitney)
form of ROC area, and the report serializers against literal strings.
"""

import math

import numpy as np
import pytest
from scipy.stats import rankdata
from sklearn.metrics import precision_recall_fscore_support, roc_auc_score

from fabricnet import metrics as X
from fabricnet.errors import ShapeError, ValidationError


def mann_whitney_auc(scores, targets):
    """Tie-aware ROC area from the rank-sum statistic."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    targets = np.asarray(targets).ravel().astype(bool)
    pos = targets.sum()
    neg = targets.size - pos
    ranks = rankdata(scores)
    return (ranks[targets].sum() - pos * (pos + 1) / 2) / (pos * neg)


# ------------------------------------------------------- confusion counts

def test_confusion_counts_small_table():
    pred = np.array([[1, 0, 1], [0, 1, 1]])
    true = np.array([[1, 1, 0], [0, 1, 1]])
    c = X.confusion_counts(pred, true)
    assert (c.tp, c.fp, c.fn, c.tn) == (3, 1, 1, 1)
    assert c.total == 6


def test_confusion_counts_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        X.confusion_counts(np.zeros((2, 3)), np.zeros((3, 2)))


def test_precision_recall_f1_formulas():
    c = X.ConfusionCounts(tp=6, fp=2, fn=4, tn=8)
    p, r, f1 = X.precision_recall_f1(c)
    assert p == pytest.approx(6 / 8)
    assert r == pytest.approx(6 / 10)
    assert f1 == pytest.approx(2 * (6 / 8) * (6 / 10) / ((6 / 8) + (6 / 10)))


def test_zero_denominators_collapse_to_zero():
    p, r, f1 = X.precision_recall_f1(X.ConfusionCounts(tp=0, fp=0, fn=0, tn=5))
    assert (p, r, f1) == (0.0, 0.0, 0.0)
    p, r, f1 = X.precision_recall_f1(X.ConfusionCounts(tp=0, fp=3, fn=0, tn=2))
    assert (p, r) == (0.0, 0.0) and f1 == 0.0


def test_micro_scores_match_sklearn():
    rng = np.random.default_rng(10)
    for _ in range(25):
        true = rng.integers(0, 2, size=(40, 6))
        pred = rng.integers(0, 2, size=(40, 6))
        got = X.micro_precision_recall_f1(pred, true)
        p, r, f1, _ = precision_recall_fscore_support(
            true, pred, average="micro", zero_division=0.0
        )
        assert got["precision"] == pytest.approx(p, abs=1e-12)
        assert got["recall"] == pytest.approx(r, abs=1e-12)
        assert got["f1"] == pytest.approx(f1, abs=1e-12)


def test_exact_match_requires_whole_row():
    pred = np.array([[1, 0], [1, 1], [0, 0]])
    true = np.array([[1, 0], [1, 0], [0, 0]])
    assert X.exact_match_accuracy(pred, true) == pytest.approx(2 / 3)


def test_exact_match_matches_row_scan():
    rng = np.random.default_rng(11)
    for _ in range(25):
        true = rng.integers(0, 2, size=(30, 5))
        pred = rng.integers(0, 2, size=(30, 5))
        want = np.mean([bool((a == b).all()) for a, b in zip(pred, true)])
        assert X.exact_match_accuracy(pred, true) == pytest.approx(want)


# ------------------------------------------------------------------- AUC

def test_auc_matches_rank_statistic_within_grid_resolution():
    rng = np.random.default_rng(12)
    for trial in range(50):
        n = 1000
        targets = rng.integers(0, 2, size=n)
        while targets.sum() in (0, n):  # keep both classes present
            targets = rng.integers(0, 2, size=n)
        # mixture so the AUC varies across trials
        lift = rng.uniform(0.05, 0.4)
        scores = np.clip(rng.uniform(size=n) + lift * targets, 0.0, 1.0)
        got = X.auc_200(scores, targets)
        want = mann_whitney_auc(scores, targets)
        assert got == pytest.approx(want, abs=0.01), f"trial {trial}"


def test_auc_matches_sklearn_within_grid_resolution():
    rng = np.random.default_rng(13)
    for _ in range(10):
        targets = rng.integers(0, 2, size=(60, 4))
        scores = np.clip(rng.uniform(size=(60, 4)) + 0.3 * targets, 0.0, 1.0)
        if len(np.unique(targets)) < 2:
            continue
        got = X.auc_200(scores, targets)
        want = roc_auc_score(targets.ravel(), scores.ravel())
        assert got == pytest.approx(want, abs=0.01)


def test_auc_perfect_separation_is_one():
    scores = np.array([0.9, 0.8, 0.95, 0.1, 0.2, 0.05])
    targets = np.array([1, 1, 1, 0, 0, 0])
    assert X.auc_200(scores, targets) == pytest.approx(1.0, abs=1e-9)


def test_auc_random_scores_near_half():
    rng = np.random.default_rng(14)
    scores = rng.uniform(size=20000)
    targets = rng.integers(0, 2, size=20000)
    assert X.auc_200(scores, targets) == pytest.approx(0.5, abs=0.02)


def test_auc_degenerate_labels_marked_nan():
    assert math.isnan(X.auc_200(np.array([0.2, 0.8]), np.array([1, 1])))
    assert math.isnan(X.auc_200(np.array([0.2, 0.8]), np.array([0, 0])))


def test_auc_rejects_scores_outside_unit_interval():
    with pytest.raises(ValidationError):
        X.auc_200(np.array([0.2, 1.3]), np.array([0, 1]))
    with pytest.raises(ValidationError):
        X.auc_200(np.array([-0.1, 0.3]), np.array([0, 1]))


def test_roc_points_monotone_and_anchored():
    rng = np.random.default_rng(15)
    targets = rng.integers(0, 2, size=500)
    scores = np.clip(rng.uniform(size=500) + 0.2 * targets, 0.0, 1.0)
    fpr, tpr = X.roc_points(scores, targets)
    assert fpr[0] == 0.0 and tpr[0] == 0.0
    assert fpr[-1] == 1.0 and tpr[-1] == 1.0
    assert (np.diff(fpr) >= 0).all()
    assert (np.diff(tpr) >= 0).all()


# ------------------------------------------------------------ aggregation

def test_aggregate_runs_format_and_population_std():
    line = X.aggregate_runs([0.5, 0.7, 0.9])
    mean = 0.7
    std = math.sqrt(((0.5 - mean) ** 2 + 0.0 + (0.9 - mean) ** 2) / 3)
    assert line == f"{mean:.3f}±{std:.3f}"


def test_aggregate_runs_single_value():
    assert X.aggregate_runs([0.25]) == "0.250±0.000"


def test_aggregate_reports_covers_all_fields():
    reports = [
        {"accuracy": 0.5, "precision": 0.5, "recall": 0.5, "f1": 0.5, "auc": 0.5, "loss": 1.0},
        {"accuracy": 0.7, "precision": 0.7, "recall": 0.7, "f1": 0.7, "auc": 0.7, "loss": 2.0},
    ]
    agg = X.aggregate_reports(reports)
    assert set(agg) == {"accuracy", "precision", "recall", "f1", "auc", "loss"}
    assert agg["accuracy"] == "0.600±0.100"
    assert agg["loss"] == "1.500±0.500"


# ---------------------------------------------------------- serialization

REPORT = {
    "accuracy": 0.9125, "precision": 0.8, "recall": 0.75, "f1": 0.774193,
    "auc": 0.9633, "loss": 0.4821, "params": 2816946, "flops": 663965540,
}


def test_report_text_field_order():
    lines = X.report_text(REPORT).splitlines()
    keys = [ln.split(":")[0].strip() for ln in lines]
    assert keys == ["accuracy", "precision", "recall", "f1", "auc", "loss", "params", "flops"]
    assert lines[0].endswith("0.912500")
    assert lines[-1].endswith("663965540")


def test_report_csv_row_and_header():
    row = X.report_csv(REPORT)
    assert row == "0.912500,0.800000,0.750000,0.774193,0.963300,0.482100,2816946,663965540"
    with_header = X.report_csv(REPORT, header=True)
    head, body = with_header.splitlines()
    assert head == "accuracy,precision,recall,f1,auc,loss,params,flops"
    assert body == row


def test_report_text_marks_undefined_auc():
    report = dict(REPORT)
    report["auc"] = float("nan")
    text = X.report_text(report)
    assert "nan" in text.lower()
