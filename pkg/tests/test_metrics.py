import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from tafusion.errors import (ConfigError, ContractError, DegenerateTestError,
                             UndefinedMetricError)
from tafusion.evaluation.metrics import (MetricReport, auprc, auroc, classification_scores,
                                         macro_auroc, mae_mse, pr_points, roc_points)
from tafusion.evaluation.stats import (betainc, paired_t_test, permutation_test,
                                       t_two_sided_p)


def pair_oracle(s, y):
    pos = [a for a, l in zip(s, y) if l]
    neg = [a for a, l in zip(s, y) if not l]
    twice = sum(2 if p > n else 1 if p == n else 0 for p in pos for n in neg)
    return twice / (2 * len(pos) * len(neg))


def ap_terms_oracle(s, y):
    """Enumerate thresholds from high to low; recall step times precision."""
    n_pos = sum(y)
    terms, prev_tp, exact = [], 0, Fraction(0)
    for t in sorted(set(s), reverse=True):
        sel = [l for a, l in zip(s, y) if a >= t]
        tp, k = sum(sel), len(sel)
        if tp > prev_tp:
            terms.append((tp - prev_tp) * tp / (n_pos * k))
            exact += Fraction(tp - prev_tp, n_pos) * Fraction(tp, k)
        prev_tp = tp
    return math.fsum(terms), exact


scores_and_labels = st.integers(2, 200).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 12).map(lambda v: v / 4), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n)).filter(lambda t: 0 < sum(t[1]) < n))


@settings(max_examples=200, deadline=None)
@given(scores_and_labels)
def test_metrics_equal_enumeration_oracles(case):
    s, y = case
    assert auroc(s, y) == pair_oracle(s, y)
    rounded, exact = ap_terms_oracle(s, y)
    assert auprc(s, y) == rounded
    assert abs(auprc(s, y) - float(exact)) < 1e-14


@settings(max_examples=100, deadline=None)
@given(scores_and_labels, st.floats(0.1, 5.0), st.floats(-3, 3))
def test_monotone_invariance(case, scale, shift):
    s, y = case
    t = np.exp(scale * np.asarray(s)) + shift
    assert auroc(t, y) == auroc(s, y)
    assert auprc(t, y) == auprc(s, y)


def test_trivial_cases():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auprc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.3] * 5, [0, 1, 0, 1, 1]) == 0.5
    # all tied: a single threshold with precision = prevalence
    assert auprc([0.3] * 5, [0, 1, 0, 1, 1]) == 0.6


def test_six_sample_hand_case():
    s = [0.9, 0.8, 0.8, 0.4, 0.3, 0.1]
    y = [1, 0, 1, 1, 0, 0]
    # positives 0.9, 0.8, 0.4 vs negatives 0.8, 0.3, 0.1: 3 + (0.5+1+1) + (1+1) = 7.5 of 9
    assert auroc(s, y) == 7.5 / 9
    # thresholds 0.9 -> (1/3, 1), 0.8 -> (2/3, 2/3), 0.4 -> (1, 3/4)
    assert auprc(s, y) == pytest.approx((1 + 2 / 3 + 3 / 4) / 3, abs=1e-15)


def test_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auprc([0.1, 0.2], [0, 0])


def test_macro_metrics():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 60)
    s = rng.random((60, 3))
    s[np.arange(60), y] += 0.5
    want = np.mean([auroc(s[:, k], y == k) for k in range(3)])
    assert macro_auroc(s, y) == want
    out = classification_scores(s, y)
    assert {"auroc", "auprc", "auroc_c0", "auprc_c2"} <= set(out)
    two = classification_scores(np.c_[1 - s[:, 0], s[:, 0]], y == 0)
    assert two["auroc"] == auroc(s[:, 0], y == 0)


def test_curve_endpoints():
    s, y = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    fpr, tpr = roc_points(s, y)
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0, 0, 1, 1)
    assert np.trapezoid(tpr, fpr) == pytest.approx(auroc(s, y))
    rec, prec = pr_points(s, y)
    assert rec[-1] == 1.0 and prec[0] == 1.0


def test_mae_mse():
    assert mae_mse([1, 2], [1, 2]) == (0.0, 0.0)
    assert mae_mse([1, -1], [0, 0]) == (1.0, 1.0)
    assert mae_mse([3], [0]) == (3.0, 9.0)
    with pytest.raises(ContractError):
        mae_mse([1, 2], [1])


def test_metric_report():
    r = MetricReport()
    r.add({"auroc": 0.8, "auprc": 0.4})
    r.add({"auroc": 0.6, "auprc": 0.2})
    assert r.mean() == pytest.approx({"auroc": 0.7, "auprc": 0.3})
    with pytest.raises(ContractError):
        r.add({"auroc": 1.2})


# ------------------------------------------------------------------ stats


def test_permutation_identical_models():
    rng = np.random.default_rng(1)
    s, y = rng.random(40), rng.integers(0, 2, 40)
    r = permutation_test(auroc, s, s, y, n_perm=200, seed=0)
    assert r.p_value == 1.0 and r.statistic == 0.0


def test_permutation_bounds_and_determinism():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 80)
    good = y + rng.normal(0, 0.3, 80)
    bad = rng.random(80)
    r = permutation_test(auroc, good, bad, y, n_perm=300, seed=4)
    assert r.p_value >= 1 / 301
    assert r.p_value < 0.01
    assert r == permutation_test(auroc, good, bad, y, n_perm=300, seed=4)
    with pytest.raises(ConfigError):
        permutation_test(auroc, good, bad, y, n_perm=99)


def test_permutation_null_calibration():
    rng = np.random.default_rng(7)
    hits = 0
    for rep in range(200):
        y = rng.integers(0, 2, 50)
        y[:2] = (0, 1)
        a, b = rng.random(50), rng.random(50)
        hits += permutation_test(auroc, a, b, y, n_perm=400, seed=rep).p_value < 0.05
    assert 0.02 <= hits / 200 <= 0.08


def test_paired_t_hand_example():
    r = paired_t_test([1, 1, 1, -1], [0, 0, 0, 0])
    assert r.statistic == pytest.approx(1.0, abs=1e-12)
    assert r.n == 3
    assert r.p_value == pytest.approx(sps.t.sf(1.0, 3) * 2, abs=1e-12)
    with pytest.raises(DegenerateTestError):
        paired_t_test([1, 2, 3], [1, 2, 3])


def test_t_distribution_tabulated():
    assert t_two_sided_p(0.0, 5) == 1.0
    # two-sided 5% critical values from standard tables
    for t, df in ((12.706, 1), (4.303, 2), (2.776, 4), (2.228, 10), (2.042, 30)):
        assert t_two_sided_p(t, df) == pytest.approx(0.05, abs=2e-4)
    assert t_two_sided_p(3.169, 10) == pytest.approx(0.01, abs=1e-4)


@settings(max_examples=200, deadline=None)
@given(st.floats(-40, 40), st.floats(0.5, 500), st.floats(0.5, 50), st.floats(0, 1))
def test_incomplete_beta_against_scipy(t, df, a, x):
    assert t_two_sided_p(t, df) == pytest.approx(2 * sps.t.sf(abs(t), df), rel=1e-9, abs=1e-15)
    # scipy loses digits as x -> 1 with b = 1/2, so the reference is high precision
    ref = float(mpmath.betainc(a, 0.5, 0, x, regularized=True))
    assert betainc(a, 0.5, x) == pytest.approx(ref, rel=1e-9, abs=1e-14)
