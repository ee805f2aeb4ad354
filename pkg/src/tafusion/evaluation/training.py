"""Mini-batch Adam training with patience-based early stopping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError, ContractError
from ..numerics import Adam, ParameterSet, Tensor, Trace, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-3
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")


class EarlyStopper:
    """Tracks the best (lowest) validation loss; epochs are 1-based."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        self.epoch += 1
        if val_loss < self.best:
            self.best, self.best_epoch, self.bad = val_loss, self.epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


@dataclass
class TrainResult:
    best_epoch: int
    best_val: float
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.val_curve)


def batches(n: int, size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + size] for i in range(0, n, size)]


def train_with_early_stopping(params: ParameterSet, train_idx: Sequence[int],
                              batch_loss: Callable[[np.ndarray], Tensor],
                              val_loss: Callable[[], float], cfg: TrainConfig,
                              label: str = "") -> TrainResult:
    """Train ``params`` in place and leave them at the best-validation checkpoint.

    ``batch_loss`` maps an array of sample indices to a scalar loss built
    from ``params``; ``val_loss`` evaluates the current parameters untraced.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ContractError(f"{label or 'training'}: empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, lr=cfg.lr)
    stopper = EarlyStopper(cfg.patience)
    result = TrainResult(0, np.inf)
    best = params.snapshot()
    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        for b in batches(len(train_idx), cfg.batch_size, rng):
            params.zero_grad()
            with Trace() as tr:
                loss = batch_loss(train_idx[b])
            backward(tr, loss)
            opt.step()
            total += float(loss.data) * len(b)
        v = float(val_loss())
        result.train_curve.append(total / len(train_idx))
        result.val_curve.append(v)
        stop = stopper.update(v)
        if stopper.best_epoch == epoch:
            best = params.snapshot()
        log.debug("%s epoch %d train %.5f val %.5f", label, epoch, result.train_curve[-1], v)
        if stop:
            break
    params.restore(best)
    result.best_epoch, result.best_val = stopper.best_epoch, float(stopper.best)
    return result
