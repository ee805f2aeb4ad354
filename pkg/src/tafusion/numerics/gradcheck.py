"""Central-difference verification of traced gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import DeterminismError
from .params import ParameterSet
from .tensor import Tensor, Trace, backward


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, ParameterSet):
        return list(params.items())
    if isinstance(params, Tensor):
        return [(params.name or "x", params)]
    out = []
    for p in params:
        out.extend(_named(p))
    return out


def grad_check(forward: Callable[[], Tensor], params, eps: float = 1e-5,
               per_param: bool = False):
    """Max over all parameter entries of |analytic - numeric| / max(1e-8, |numeric|).

    ``forward`` must rebuild the scalar loss from the current parameter values.
    With ``per_param`` the per-tensor maxima are returned alongside.
    """
    named = _named(params)
    a0 = float(forward().data)
    a1 = float(forward().data)
    if a0 != a1:
        raise DeterminismError(f"forward is not deterministic: {a0!r} != {a1!r}")

    saved = [(t, t.grad, t.requires_grad) for _, t in named]
    for _, t in named:
        t.grad = None
        t.requires_grad = True
    with Trace() as tr:
        loss = forward()
    backward(tr, loss)
    analytic = {id(t): (t.grad if t.grad is not None else np.zeros_like(t.data)) for _, t in named}

    worst = 0.0
    report: dict[str, float] = {}
    for name, t in named:
        flat = t.data.reshape(-1)
        an = analytic[id(t)].reshape(-1)
        err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(forward().data)
            flat[i] = orig - eps
            fm = float(forward().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            err = max(err, abs(an[i] - num) / max(1e-8, abs(num)))
        report[name] = err
        worst = max(worst, err)

    for t, g, rg in saved:
        t.grad, t.requires_grad = g, rg
    return (worst, report) if per_param else worst


def weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * w).sum()

