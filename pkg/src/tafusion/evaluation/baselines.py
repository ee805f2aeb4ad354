"""Lab-only comparators for the sparse series encoder.

* latest value per item fed to an MLP;
* values averaged into uniform time windows, gaps imputed (forward fill then
  training median, or zero fill), and a recurrent encoder over the windows.

Values are standardised with training statistics, so a zero fill sits at
each item's training mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..fusion import REGRESSION, decode_task, init_decoder, task_loss
from ..numerics import ParameterSet, Tensor, gru_forward, lstm_forward
from ..numerics.params import init_gru, init_lstm
from ..synthdata import ICU_HORIZON, LAB_HISTORY, MULTICLASS, CohortDataset, FoldRoles
from .metrics import classification_scores, regression_scores
from .training import TrainConfig, TrainResult, train_with_early_stopping

FORWARD, ZERO = "forward", "zero"


def _train_ids(ds, roles):
    return [ds.subjects[i] for i in roles.train]


def lab_span(ds: CohortDataset, s) -> tuple[float, float]:
    if ds.config.task == MULTICLASS:
        return s.t_anchor - LAB_HISTORY, s.t_anchor
    return s.t_anchor, s.t_anchor + ICU_HORIZON


@dataclass(frozen=True)
class ItemScaler:
    items: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def fit_item_scaler(rows: np.ndarray, items) -> ItemScaler:
    """Per-column mean/std over the non-missing entries of ``rows``."""
    mu = np.array([np.nanmean(c) if np.isfinite(c).any() else 0.0 for c in rows.T])
    sd = np.array([np.nanstd(c) if np.isfinite(c).sum() > 1 else 1.0 for c in rows.T])
    return ItemScaler(tuple(items), mu, np.maximum(sd, 1e-6))


def latest_values(labs, items) -> np.ndarray:
    """Most recent value of each item (NaN when never observed)."""
    out = np.full(len(items), np.nan)
    when = np.full(len(items), -np.inf)
    col = {it: j for j, it in enumerate(items)}
    for o in labs:
        j = col.get(o.item_id)
        if j is not None and o.timestamp >= when[j]:
            out[j], when[j] = o.value, o.timestamp
    return out


def window_means(labs, items, t_lo: float, t_hi: float, n_steps: int) -> np.ndarray:
    """(n_steps, items) mean value per uniform window, NaN where nothing was measured."""
    col = {it: j for j, it in enumerate(items)}
    tot = np.zeros((n_steps, len(items)))
    cnt = np.zeros((n_steps, len(items)))
    width = (t_hi - t_lo) / n_steps
    for o in labs:
        j = col.get(o.item_id)
        if j is None or not t_lo <= o.timestamp < t_hi:
            continue
        k = min(int((o.timestamp - t_lo) // width), n_steps - 1)
        tot[k, j] += o.value
        cnt[k, j] += 1
    with np.errstate(invalid="ignore"):
        return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)


def forward_fill(grid: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Carry the last observation forward in time; leading gaps take ``fallback``."""
    out = grid.copy()
    for j in range(out.shape[1]):
        last = np.nan
        for k in range(out.shape[0]):
            if np.isnan(out[k, j]):
                out[k, j] = last
            else:
                last = out[k, j]
        out[np.isnan(out[:, j]), j] = fallback[j]
    return out


def static_latest_features(ds: CohortDataset, roles: FoldRoles) -> np.ndarray:
    items = ds.config.lab_items
    raw = np.stack([latest_values(s.labs, items) for s in ds.subjects])
    scaler = fit_item_scaler(raw[list(roles.train)], items)
    return np.nan_to_num(scaler(raw), nan=0.0)


def imputed_sequences(ds: CohortDataset, roles: FoldRoles, fill: str = FORWARD,
                      n_steps: int = 24) -> np.ndarray:
    """(N, n_steps, items) imputed and standardised window means."""
    if fill not in (FORWARD, ZERO):
        raise ConfigError(f"unknown fill {fill!r}; expected {FORWARD!r} or {ZERO!r}")
    items = ds.config.lab_items
    grids = np.stack([window_means(s.labs, items, *lab_span(ds, s), n_steps)
                      for s in ds.subjects])
    train = grids[list(roles.train)].reshape(-1, len(items))
    scaler = fit_item_scaler(train, items)
    if fill == ZERO:
        return np.nan_to_num(scaler(grids), nan=0.0)
    med = np.array([np.nanmedian(c) if np.isfinite(c).any() else 0.0 for c in train.T])
    # an item never observed in training: its median is unknown, use the scaler mean
    med = np.where(np.isfinite(med), med, scaler.mean)
    return scaler(np.stack([forward_fill(g, med) for g in grids]))


@dataclass
class BaselineResult:
    name: str
    params: ParameterSet
    scores: dict[str, float]
    predictions: np.ndarray
    result: TrainResult


def _fit(name: str, ds: CohortDataset, roles: FoldRoles, X: np.ndarray, encode, ps: ParameterSet,
         cfg: TrainConfig) -> BaselineResult:
    head = "regression" if ds.config.task == "regression" else "classification"
    y = ds.labels

    def out(idx):
        return decode_task(encode(Tensor(X[idx])), ps, head)

    def batch_loss(idx):
        return task_loss(out(idx), y[idx], head)

    val = np.asarray(roles.val, dtype=np.int64)

    def val_loss():
        return float(task_loss(Tensor(out(val).data), y[val], head).data)

    res = train_with_early_stopping(ps, roles.train, batch_loss, val_loss, cfg, label=name)
    test = np.asarray(roles.test, dtype=np.int64)
    pred = out(test).data
    if head == REGRESSION:
        scores = regression_scores(pred, y[test])
    else:
        scores = classification_scores(np.exp(pred), y[test])
    return BaselineResult(name, ps, scores, pred, res)


def baseline_static_latest(ds: CohortDataset, roles: FoldRoles, cfg: TrainConfig | None = None,
                           hidden: int = 32, seed: int = 0) -> BaselineResult:
    cfg = cfg or TrainConfig(seed=seed)
    X = static_latest_features(ds, roles)
    ps = ParameterSet(seed)
    head = "regression" if ds.config.task == "regression" else "classification"
    init_decoder(ps, X.shape[1], head, max(ds.config.n_classes, 2), hidden)
    return _fit("static_latest", ds, roles, X, lambda x: x, ps, cfg)


def baseline_imputed_rnn(ds: CohortDataset, roles: FoldRoles, cell: str = "lstm",
                         fill: str = FORWARD, cfg: TrainConfig | None = None, hidden: int = 16,
                         seed: int = 0, n_steps: int = 24) -> BaselineResult:
    if cell not in ("lstm", "gru"):
        raise ConfigError(f"unknown recurrent cell {cell!r}")
    cfg = cfg or TrainConfig(seed=seed)
    X = imputed_sequences(ds, roles, fill, n_steps)
    ps = ParameterSet(seed)
    (init_lstm if cell == "lstm" else init_gru)(ps, "rnn", X.shape[2], hidden)
    head = "regression" if ds.config.task == "regression" else "classification"
    init_decoder(ps, hidden, head, max(ds.config.n_classes, 2), 32)
    run = lstm_forward if cell == "lstm" else gru_forward

    def encode(x):
        return run(x, ps, "rnn")[1]

    return _fit(f"{cell}_{fill}", ds, roles, X, encode, ps, cfg)
