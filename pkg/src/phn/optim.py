"""SGD and Adam over lists of parameter tensors."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError


class Optimizer:
    kind = "base"

    def __init__(self, params, lr):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _grads(self):
        grads = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {p.name or i} has no gradient; call backward first")
            grads.append(p.grad)
        return grads

    def step(self):
        raise NotImplementedError


class SGD(Optimizer):
    kind = "sgd"

    def step(self):
        grads = self._grads()
        self.step_count += 1
        for p, g in zip(self.params, grads):
            p.data -= self.lr * g


class Adam(Optimizer):
    """Bias-corrected Adam; epsilon is added outside the square root."""

    kind = "adam"

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = self._grads()
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind, params, lr, **kwargs):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr, **kwargs)
    raise ConfigError(f"unknown optimizer {kind!r}; expected 'sgd' or 'adam'")
