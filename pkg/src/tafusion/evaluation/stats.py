"""Paired significance tests: a swap permutation test and the paired t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import ConfigError, ContractError, DegenerateTestError, NumericError

PERMUTATION = "permutation"
PAIRED_T = "paired-t"


@dataclass(frozen=True)
class StatTestResult:
    kind: str
    statistic: float
    p_value: float
    n: float  # permutation count or degrees of freedom

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ContractError(f"p-value {self.p_value} outside [0, 1]")


def permutation_test(metric: Callable, scores_a, scores_b, labels, n_perm: int = 1000,
                     seed: int = 0) -> StatTestResult:
    """Two-sided test of metric(A) == metric(B) on shared samples.

    Each permutation swaps the A and B predictions of a random subset of
    samples; the statistic is the absolute metric difference.
    """
    if n_perm < 100:
        raise ConfigError(f"n_perm={n_perm} is too small for a usable p-value (need >= 100)")
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"paired scores differ in shape: {a.shape} vs {b.shape}")
    observed = abs(metric(a, labels) - metric(b, labels))
    rng = np.random.default_rng(seed)
    shape = (a.shape[0],) + (1,) * (a.ndim - 1)
    hits = 0
    for _ in range(n_perm):
        swap = (rng.random(a.shape[0]) < 0.5).reshape(shape)
        pa, pb = np.where(swap, b, a), np.where(swap, a, b)
        hits += abs(metric(pa, labels) - metric(pb, labels)) >= observed
    return StatTestResult(PERMUTATION, float(observed), (1 + hits) / (1 + n_perm), n_perm)


def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 3e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        step = d * c
        h *= step
        if abs(step - 1.0) < tol:
            return h
    raise NumericError(f"incomplete beta did not converge for a={a} b={b} x={x}")


def betainc(a: float, b: float, x: float, x_comp: float | None = None) -> float:
    """Regularized incomplete beta I_x(a, b).

    ``x_comp`` is 1 - x when the caller can form it without cancellation.
    """
    if not 0.0 <= x <= 1.0:
        raise ContractError(f"x={x} outside [0, 1]")
    y = 1.0 - x if x_comp is None else x_comp
    if x == 0.0 or y == 0.0:
        return 0.0 if x == 0.0 else 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(y))
    front = math.exp(log_front)
    # the fraction converges fast on this side of the mean; use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, y) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ContractError(f"df must be positive, got {df}")
    t2 = t * t
    return min(1.0, betainc(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2)))


def paired_t_test(errors_a, errors_b) -> StatTestResult:
    a = np.asarray(errors_a, dtype=np.float64).ravel()
    b = np.asarray(errors_b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ContractError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ContractError("paired t-test needs at least two pairs")
    d = a - b
    var = float(np.var(d, ddof=1))
    if var == 0.0:
        raise DegenerateTestError("differences have zero variance")
    df = d.size - 1
    t = float(d.mean()) / math.sqrt(var / d.size)
    return StatTestResult(PAIRED_T, t, t_two_sided_p(t, df), df)
