from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ContractError
from .params import ParameterSet


class Adam:
    """Adam with bias correction; betas and eps are fixed at (0.9, 0.999), 1e-8."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: ParameterSet, lr: float = 1e-3, frozen: tuple[str, ...] = ()):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.frozen = set(frozen)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        missing = [k for k, p in self.params.items() if p.grad is None and k not in self.frozen]
        if missing:
            raise ContractError(f"no gradient for parameter(s): {', '.join(missing[:5])}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if k in self.frozen:
                continue
            g = p.grad
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(opt: Adam):
    opt.step()
    return opt.params
