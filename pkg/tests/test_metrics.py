import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import random_rows
from pdsfda import metrics
from pdsfda.errors import ValidationError


def test_accuracy_and_per_class():
    P = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    y = np.array([0, 1, 1, 1])
    assert metrics.accuracy(P, y) == 0.75
    assert metrics.per_class_accuracy(P, y).tolist() == [1.0, 2 / 3]
    assert np.isnan(metrics.per_class_accuracy(P, np.zeros(4, int), C=3)[2])


def test_disagreement_examples():
    P = np.stack([random_rows(np.random.default_rng(0), 5, 3)] * 3)
    assert metrics.disagreement(P) == 0.0
    a = np.eye(2)[[0, 0, 1, 1]]
    b = np.eye(2)[[0, 0, 1, 0]]
    P = np.stack([a, b])
    assert metrics.disagreement(P) == 0.5
    assert metrics.disagreement(P, normalized=True) == 0.25
    with pytest.raises(ValidationError):
        metrics.disagreement(P[:1])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4), st.integers(1, 8), st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_disagreement_oracle_and_permutation(M, N, C, seed):
    rng = np.random.default_rng(seed)
    P = np.stack([random_rows(rng, N, C, 3.0) for _ in range(M)])
    d = metrics.disagreement(P)
    assert d == oracles.disagreement(P.tolist())
    assert metrics.disagreement(P[rng.permutation(M)]) == d
    labels = P.argmax(axis=2)
    assert (d == 0) == bool(np.all(labels == labels[0]))
    assert 0 <= metrics.disagreement(P, normalized=True) <= 1


def test_brier_examples():
    assert metrics.brier(np.eye(3), [0, 1, 2]) == 0.0
    assert metrics.brier([[0.5, 0.5]], [0]) == 0.5
    assert metrics.brier(np.full((3, 4), 0.25), [0, 1, 3]) == pytest.approx(0.75, abs=1e-15)


def test_brier_monotone_toward_true_class():
    vals = [metrics.brier([[t, 1 - t, 0.0]], [0]) for t in np.linspace(0, 1, 21)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ece_examples():
    assert metrics.ece(np.eye(3), [0, 1, 2]) == 0.0
    assert metrics.ece(np.eye(3), [1, 2, 0]) == 1.0


def test_ece_hand_instance():
    # confidences 0.85, 0.82 share bin [0.8, 0.9): one right, one wrong
    # confidences 0.58, 0.55 share bin [0.5, 0.6): both right
    P = np.array([[0.85, 0.15], [0.18, 0.82], [0.58, 0.42], [0.45, 0.55]])
    y = [0, 0, 0, 1]
    expect = 0.5 * abs(0.5 - 0.835) + 0.5 * abs(1.0 - 0.565)
    assert metrics.ece(P, y) == pytest.approx(expect, abs=1e-15)
    assert expect == pytest.approx(0.385, abs=1e-15)


def test_ece_zero_when_bins_are_calibrated():
    # four samples at confidence 0.75, three of four correct
    P = np.tile([0.75, 0.25], (4, 1))
    assert metrics.ece(P, [0, 0, 0, 1]) == pytest.approx(0.0, abs=1e-15)


def test_reliability_bins_last_closed():
    bins = metrics.reliability_bins(np.array([[1.0, 0.0], [0.5, 0.5]]), [0, 0], bins=2)
    assert [b["count"] for b in bins] == [0, 2]
    with pytest.raises(ValidationError):
        metrics.reliability_bins(np.eye(2), [0, 1], bins=0)


def test_calibration_oracles(rng):
    for _ in range(50):
        n, C = int(rng.integers(1, 9)), int(rng.integers(2, 5))
        P = random_rows(rng, n, C, 2.0)
        y = rng.integers(0, C, n)
        assert abs(metrics.brier(P, y) - oracles.brier(P.tolist(), y.tolist())) <= 1e-12
        assert abs(metrics.ece(P, y) - oracles.ece(P.tolist(), y.tolist())) <= 1e-12


def test_evaluate_report_ranges_and_json(rng):
    P = np.stack([random_rows(rng, 20, 3) for _ in range(3)])
    y = rng.integers(0, 3, 20)
    rep = metrics.evaluate(P, y)
    assert 0 <= rep.accuracy <= 1 and 0 <= rep.ece <= 1 and 0 <= rep.brier <= 2 and rep.disagreement >= 0
    assert json.loads(rep.to_json())["accuracy"] == rep.accuracy
    single = metrics.evaluate(P[:1], y)
    assert single.disagreement == 0.0


def test_ci_hand_value():
    r = metrics.ci_difference(0.8, 100, 0.7, 100)
    assert r.se_diff == pytest.approx(math.sqrt(0.0037), abs=1e-15)
    assert r.interval == pytest.approx((0.0392, 0.1608), abs=1e-4)
    assert r.overlaps_zero is False


def test_ci_equal_accuracies_symmetric():
    r = metrics.ci_difference(0.6, 50, 0.6, 80)
    assert r.interval[0] == -r.interval[1] and r.overlaps_zero


def test_ci_z_scales_half_width():
    a = metrics.ci_difference(0.8, 100, 0.7, 120, z=1.0)
    b = metrics.ci_difference(0.8, 100, 0.7, 120, z=2.0)
    assert (b.interval[1] - b.interval[0]) == pytest.approx(2 * (a.interval[1] - a.interval[0]), rel=1e-15)


def test_ci_validation():
    with pytest.raises(ValidationError):
        metrics.ci_difference(0.5, 0, 0.5, 10)
    with pytest.raises(ValidationError):
        metrics.ci_difference(1.5, 10, 0.5, 10)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.integers(1, 500), st.integers(1, 500))
def test_ci_width_monotone_in_n(a1, a2, n1, n2):
    w = lambda r: r.interval[1] - r.interval[0]
    base = metrics.ci_difference(a1, n1, a2, n2)
    assert w(metrics.ci_difference(a1, n1 + 1, a2, n2)) < w(base)
    assert w(metrics.ci_difference(a1, n1, a2, n2 + 1)) < w(base)
    lo, hi = base.interval
    assert lo == base.p_diff - base.se_diff and hi == base.p_diff + base.se_diff


def test_ci_table_csv(tmp_path):
    rows = [{"source": "a", "run": 0, "target": "b", "p_diff": 0.1, "se_diff": 0.05,
             "lo": 0.05, "hi": 0.15, "overlaps_zero": False}]
    path = tmp_path / "ci.csv"
    metrics.write_ci_table(rows, path)
    back = list(csv.DictReader(path.open()))
    assert list(back[0]) == metrics.CI_COLUMNS
    assert float(back[0]["hi"]) == 0.15 and back[0]["overlaps_zero"] == "False"
