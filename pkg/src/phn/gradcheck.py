"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .tensor import backward


def _scalar(value):
    v = float(np.asarray(value.data if hasattr(value, "data") else value).reshape(-1)[0])
    if not math.isfinite(v):
        raise NumericError(f"function returned a non-finite value: {v}")
    return v


@dataclass(frozen=True)
class CoordinateCheck:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def error(self):
        return abs(self.analytic - self.numeric) / max(1e-8, abs(self.analytic) + abs(self.numeric))


def finite_difference_report(f, params, h=1e-4, max_coords=None, seed=0):
    """Per-coordinate analytic and central-difference derivatives of ``f``.

    ``f`` takes no arguments and builds a scalar Tensor from the current
    values of ``params``. With ``max_coords`` set, at most that many
    coordinates per parameter are checked, chosen with a seeded generator;
    otherwise every coordinate is.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    _scalar(loss)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    out = []
    for k, (p, a) in enumerate(zip(params, analytic)):
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(f())
            flat[i] = orig - h
            down = _scalar(f())
            flat[i] = orig
            name = p.name if p.name else f"param{k}"
            out.append(CoordinateCheck(name, int(i), float(a.reshape(-1)[i]), (up - down) / (2.0 * h)))
    return out


def finite_difference_check(f, params, h=1e-4, max_coords=None, seed=0):
    """Max over checked coordinates of ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.

    See ``finite_difference_report`` for the arguments.
    """
    return max((c.error for c in finite_difference_report(f, params, h, max_coords, seed)), default=0.0)
