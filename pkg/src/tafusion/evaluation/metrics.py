"""Ranking and regression metrics.

AUROC is the Mann-Whitney statistic with tied pairs counted one half.
AUPRC is average precision over the distinct score thresholds.  Both are
computed so that every summand is a single correctly-rounded division of
integers, which makes them reproducible against brute-force enumeration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, UndefinedMetricError


def _binary_inputs(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ContractError("scores must be finite")
    y = y.astype(bool) if y.dtype != bool else y
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("metric needs both positive and negative samples")
    return s, y, n_pos


def _midranks(s: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing the mean of their positions, times two."""
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    twice = ends * 2 - counts + 1  # start + end in 1-based positions
    return twice[inv]


def auroc(scores, labels) -> float:
    s, y, n_pos = _binary_inputs(scores, labels)
    n_neg = y.size - n_pos
    twice_rank_sum = int(_midranks(s)[y].sum())
    # 2U = 2*sum(ranks) - n_pos*(n_pos+1), an exact integer
    twice_u = twice_rank_sum - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def auprc(scores, labels) -> float:
    s, y, n_pos = _binary_inputs(scores, labels)
    uniq, inv = np.unique(-s, return_inverse=True)
    tp = np.cumsum(np.bincount(inv, weights=y, minlength=uniq.size)).astype(np.int64)
    fp = np.cumsum(np.bincount(inv, weights=~y, minlength=uniq.size)).astype(np.int64)
    d_tp = np.diff(tp, prepend=0)
    terms = [int(dt) * int(t) / (n_pos * int(t + f)) for dt, t, f in zip(d_tp, tp, fp) if dt]
    return math.fsum(terms)


def _one_vs_rest(metric, scores, labels) -> list[float]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.ndim != 2 or s.shape[0] != y.size:
        raise ContractError(f"expected ({y.size}, K) class scores, got {s.shape}")
    return [metric(s[:, k], y == k) for k in range(s.shape[1])]


def macro_auroc(scores, labels) -> float:
    return float(np.mean(_one_vs_rest(auroc, scores, labels)))


def macro_auprc(scores, labels) -> float:
    return float(np.mean(_one_vs_rest(auprc, scores, labels)))


def mae_mse(preds, targets) -> tuple[float, float]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size != t.size:
        raise ContractError(f"{p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise ContractError("mae_mse needs at least one sample")
    e = p - t
    return float(np.mean(np.abs(e))), float(np.mean(e * e))


def classification_scores(scores, labels) -> dict[str, float]:
    """AUROC and AUPRC; ``scores`` is (n,) for binary or (n, K) for K classes.

    A two-column score matrix is scored on its positive column.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2 and s.shape[1] == 2:
        s = s[:, 1]
    if s.ndim == 1:
        return {"auroc": auroc(s, labels), "auprc": auprc(s, labels)}
    out = {"auroc": macro_auroc(s, labels), "auprc": macro_auprc(s, labels)}
    y = np.asarray(labels)
    for k in range(s.shape[1]):
        out[f"auroc_c{k}"] = auroc(s[:, k], y == k)
        out[f"auprc_c{k}"] = auprc(s[:, k], y == k)
    return out


def regression_scores(preds, targets) -> dict[str, float]:
    mae, mse = mae_mse(preds, targets)
    return {"mae": mae, "mse": mse}


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """False/true positive rates at each distinct threshold, from (0, 0)."""
    s, y, n_pos = _binary_inputs(scores, labels)
    uniq, inv = np.unique(-s, return_inverse=True)
    tp = np.cumsum(np.bincount(inv, weights=y, minlength=uniq.size))
    fp = np.cumsum(np.bincount(inv, weights=~y, minlength=uniq.size))
    return np.r_[0.0, fp / (y.size - n_pos)], np.r_[0.0, tp / n_pos]


def pr_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision at each distinct threshold."""
    s, y, n_pos = _binary_inputs(scores, labels)
    uniq, inv = np.unique(-s, return_inverse=True)
    tp = np.cumsum(np.bincount(inv, weights=y, minlength=uniq.size))
    fp = np.cumsum(np.bincount(inv, weights=~y, minlength=uniq.size))
    return tp / n_pos, tp / (tp + fp)


@dataclass
class MetricReport:
    """Per-fold metric dicts plus their means."""

    folds: list[dict[str, float]] = field(default_factory=list)

    def add(self, scores: dict[str, float]):
        for k, v in scores.items():
            if k.startswith(("auroc", "auprc")) and not 0.0 <= v <= 1.0:
                raise ContractError(f"{k}={v} outside [0, 1]")
            if k in ("mae", "mse") and v < 0:
                raise ContractError(f"{k}={v} is negative")
        self.folds.append(dict(scores))

    @property
    def names(self) -> list[str]:
        seen = []
        for f in self.folds:
            seen += [k for k in f if k not in seen]
        return seen

    def mean(self) -> dict[str, float]:
        return {k: float(np.mean([f[k] for f in self.folds if k in f])) for k in self.names}

    def std(self) -> dict[str, float]:
        return {k: float(np.std([f[k] for f in self.folds if k in f])) for k in self.names}
