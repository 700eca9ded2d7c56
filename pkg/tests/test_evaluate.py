from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fluxmice.evaluate import (
    AD_CRITICAL,
    ModelScores,
    anderson_darling_normality,
    auroc_report,
    chi_square_test,
    concordance,
    format_auc,
    mann_whitney_u,
    roc_curve,
)
from oracles import pairwise_auc


def test_hand_case_auc():
    assert roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).auc == 0.75


def test_perfect_and_uninformative():
    assert roc_curve([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0
    assert roc_curve([0.5] * 6, [0, 1, 0, 1, 1, 0]).auc == 0.5


def test_curve_endpoints_and_monotone():
    rng = np.random.default_rng(0)
    c = roc_curve(rng.random(100), rng.integers(0, 2, 100))
    assert (c.fpr[0], c.tpr[0], c.fpr[-1], c.tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert math.isinf(c.thresholds[0])


def test_single_class_rejected():
    with pytest.raises(ValueError):
        roc_curve([0.1, 0.2], [1, 1])


labelled = st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=40).filter(
    lambda xs: 0 < sum(l for _, l in xs) < len(xs)
)


@settings(max_examples=200, deadline=None)
@given(labelled)
def test_auc_equals_concordance_exactly(pairs):
    s, y = zip(*pairs)
    s = np.array(s, dtype=float) / 7.0  # coarse grid forces ties
    auc = roc_curve(s, y).auc
    assert auc == concordance(s, y)
    assert auc == pytest.approx(pairwise_auc(s, y), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(labelled)
def test_auc_relates_to_mann_whitney_u(pairs):
    s, y = zip(*pairs)
    s, y = np.array(s, float), np.array(y)
    u, _ = mann_whitney_u(s[y == 1], s[y == 0])
    assert u / ((y == 1).sum() * (y == 0).sum()) == pytest.approx(roc_curve(s, y).auc, abs=1e-12)


def test_mann_whitney_matches_scipy_with_ties():
    rng = np.random.default_rng(3)
    x = rng.integers(0, 10, 35).astype(float)
    y = rng.integers(2, 12, 50).astype(float)
    u, p = mann_whitney_u(x, y)
    ref = stats.mannwhitneyu(x, y, alternative="two-sided", use_continuity=True, method="asymptotic")
    assert u == ref.statistic
    assert math.isclose(p, ref.pvalue, rel_tol=1e-10)


def test_chi_square_against_formula_and_scipy():
    table = [[30, 10], [20, 40]]
    stat, p = chi_square_test(table)
    a, b, c, d = 30, 10, 20, 40
    n = a + b + c + d
    assert math.isclose(stat, n * (a * d - b * c) ** 2 / ((a + b) * (c + d) * (a + c) * (b + d)), rel_tol=1e-12)
    ref = stats.chi2_contingency(table, correction=False)
    assert math.isclose(p, ref[1], rel_tol=1e-10)
    stat_y, p_y = chi_square_test(table, correction=True)
    ref_y = stats.chi2_contingency(table, correction=True)
    assert math.isclose(stat_y, ref_y[0], rel_tol=1e-12) and stat_y < stat


def test_anderson_darling_statistic_matches_scipy():
    x = np.random.default_rng(1).normal(size=200)
    res = anderson_darling_normality(x)
    assert math.isclose(res.statistic, stats.anderson(x).statistic, rel_tol=1e-9)


def test_anderson_darling_rejects_skewed_and_calibrated_on_normal():
    rng = np.random.default_rng(11)
    assert anderson_darling_normality(rng.exponential(size=300)).rejects(0.05)
    rejections = sum(anderson_darling_normality(rng.normal(size=50)).rejects(0.05) for _ in range(600))
    assert 0.02 <= rejections / 600 <= 0.085
    assert AD_CRITICAL[2] == 0.787


def test_format_auc():
    assert format_auc(0.7213, 0.0031) == "72% (SD 0.003)"
    assert format_auc(0.71) == "71%"


def test_report_writes_curves_and_summary(tmp_path):
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 60)
    s = y + rng.normal(size=60)
    per = [(s + rng.normal(scale=0.1, size=60), y) for _ in range(3)]
    rows = auroc_report([ModelScores("cc", s, y), ModelScores("mi", s, y, per)], tmp_path)
    assert [r["model"] for r in rows] == ["cc", "mi"]
    assert math.isnan(rows[0]["auc_sd"]) and rows[1]["auc_sd"] >= 0
    for name in ("roc_cc.csv", "roc_cc.svg", "roc_mi.csv", "auc_summary.csv"):
        assert (tmp_path / name).exists()
