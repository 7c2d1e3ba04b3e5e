"""The three parallel interaction stacks: cross, field interaction and feed-forward.

Residual modes:

* ``base`` - only the skip terms already part of each layer's formula.
* ``rl``   - an identity skip per layer (for the cross layer this is the
  formula's own trailing ``x_i``, so ``rl`` and ``base`` coincide there).
* ``prl``  - the skip is scaled elementwise by a trainable vector ``p``
  initialised to ones.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

RESIDUAL_MODES = ("base", "rl", "prl")


def _check_mode(mode):
    if mode not in RESIDUAL_MODES:
        raise ConfigError(f"residual mode must be one of {RESIDUAL_MODES}, got {mode!r}")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Single-layer ops
# ---------------------------------------------------------------------------


def cross_layer(x0, xi, W, w, b, mode="base", p=None):
    """``x0 * (W x_i + b) + x0 * (x_i . w) + skip`` on rows of shape (batch, n).

    ``W`` is (n, n) and applied to column vectors, ``w`` is (n, 1), ``b`` is
    (n,). The skip is ``x_i`` for base/rl and ``p * x_i`` for prl.
    """
    x0, xi = T.as_tensor(x0), T.as_tensor(xi)
    n = xi.shape[-1]
    if x0.shape != xi.shape or W.shape != (n, n) or w.shape != (n, 1) or b.shape != (n,):
        raise DimensionError(
            f"cross layer shapes: x0 {x0.shape}, x_i {xi.shape}, W {W.shape}, w {w.shape}, b {b.shape}"
        )
    _check_mode(mode)
    matrix_term = T.mul(x0, T.add(T.matmul(xi, T.transpose(W)), b))
    vector_term = T.mul(x0, T.matmul(xi, w))
    if mode == "prl":
        if p is None or p.shape != (n,):
            raise ConfigError("prl cross layer needs a residual vector p of shape (n,)")
        skip = T.mul(p, xi)
    else:
        skip = xi
    return T.add(T.add(matrix_term, vector_term), skip)


def field_interaction_layer(H, E0, K, u, mode="base", p=None):
    """``out_i = h_i * sum_j K[i, j] e0_j + u[i] * h_i`` (+ residual) on (batch, F, d).

    ``u`` has shape (F, 1); the prl residual ``p`` has shape (F, d).
    """
    H, E0 = T.as_tensor(H), T.as_tensor(E0)
    F = H.shape[-2]
    if H.shape != E0.shape or K.shape != (F, F) or u.shape != (F, 1):
        raise DimensionError(f"field layer shapes: H {H.shape}, E0 {E0.shape}, K {K.shape}, u {u.shape}")
    _check_mode(mode)
    out = T.add(T.mul(H, T.matmul(K, E0)), T.mul(u, H))
    if mode == "rl":
        out = T.add(out, H)
    elif mode == "prl":
        if p is None or p.shape != H.shape[-2:]:
            raise ConfigError("prl field layer needs a residual matrix p of shape (F, d)")
        out = T.add(out, T.mul(p, H))
    return out


def ffn_layer(x, weight, bias, slope=0.01, mode="base", p=None):
    """``LeakyReLU(x @ weight + bias)`` plus a skip when mode is rl/prl."""
    x = T.as_tensor(x)
    _check_mode(mode)
    d_in, d_out = weight.shape
    if x.shape[-1] != d_in or bias.shape != (d_out,):
        raise DimensionError(f"ffn layer shapes: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    y = T.leaky_relu(T.add(T.matmul(x, weight), bias), slope)
    if mode == "base":
        return y
    if d_in != d_out:
        raise ConfigError(f"residual skip needs d_in == d_out, got {d_in} -> {d_out}")
    if mode == "rl":
        return T.add(y, x)
    if p is None or p.shape != (d_out,):
        raise ConfigError("prl ffn layer needs a residual vector p of shape (d_out,)")
    return T.add(y, T.mul(p, x))


# ---------------------------------------------------------------------------
# Towers
# ---------------------------------------------------------------------------


class CrossTower:
    kind = "cross"

    def __init__(self, n, layers, mode, rng):
        if layers < 1:
            raise ConfigError(f"cross tower needs >= 1 layer, got {layers}")
        _check_mode(mode)
        self.n, self.mode = n, mode
        self.layers = []
        for i in range(layers):
            layer = {
                "W": T.parameter(_uniform(rng, n, (n, n)), name=f"cross.{i}.W"),
                "w": T.parameter(_uniform(rng, n, (n, 1)), name=f"cross.{i}.w"),
                "b": T.parameter(np.zeros(n), name=f"cross.{i}.b"),
            }
            if mode == "prl":
                layer["p"] = T.parameter(np.ones(n), name=f"cross.{i}.p")
            self.layers.append(layer)

    @property
    def output_dim(self):
        return self.n

    def parameters(self):
        return [t for layer in self.layers for t in layer.values()]

    def __call__(self, E):
        B = E.shape[0]
        x0 = T.reshape(E, (B, self.n))
        x = x0
        for layer in self.layers:
            x = cross_layer(x0, x, layer["W"], layer["w"], layer["b"], self.mode, layer.get("p"))
        return x


class FieldInteractionTower:
    kind = "field"

    def __init__(self, field_count, dim, layers, mode, rng):
        if layers < 1:
            raise ConfigError(f"field interaction tower needs >= 1 layer, got {layers}")
        _check_mode(mode)
        self.field_count, self.dim, self.mode = field_count, dim, mode
        self.layers = []
        for i in range(layers):
            layer = {
                "K": T.parameter(_uniform(rng, field_count, (field_count, field_count)), name=f"field.{i}.K"),
                "u": T.parameter(np.ones((field_count, 1)), name=f"field.{i}.u"),
            }
            if mode == "prl":
                layer["p"] = T.parameter(np.ones((field_count, dim)), name=f"field.{i}.p")
            self.layers.append(layer)

    @property
    def output_dim(self):
        return self.field_count * self.dim

    def parameters(self):
        return [t for layer in self.layers for t in layer.values()]

    def __call__(self, E):
        h = E
        for layer in self.layers:
            h = field_interaction_layer(h, E, layer["K"], layer["u"], self.mode, layer.get("p"))
        return T.reshape(h, (E.shape[0], self.output_dim))


def ffn_widths(input_dim, dim, layers):
    """Default widths: ``layers - 1`` hidden layers of 4*dim, then dim."""
    if layers < 1:
        raise ConfigError(f"ffn tower needs >= 1 layer, got {layers}")
    return [input_dim] + [4 * dim] * (layers - 1) + [dim]


class FfnTower:
    """Feed-forward stack; rl/prl skips are added on layers whose width is unchanged."""

    kind = "ffn"

    def __init__(self, widths, mode, slope, rng):
        _check_mode(mode)
        if len(widths) < 2:
            raise ConfigError("ffn tower needs at least input and output width")
        self.widths = list(widths)
        self.mode, self.slope = mode, slope
        self.layers = []
        for i, (d_in, d_out) in enumerate(zip(widths[:-1], widths[1:])):
            layer = {
                "weight": T.parameter(_uniform(rng, d_in, (d_in, d_out)), name=f"ffn.{i}.weight"),
                "bias": T.parameter(np.zeros(d_out), name=f"ffn.{i}.bias"),
            }
            if mode == "prl" and d_in == d_out:
                layer["p"] = T.parameter(np.ones(d_out), name=f"ffn.{i}.p")
            self.layers.append(layer)

    @property
    def output_dim(self):
        return self.widths[-1]

    def parameters(self):
        return [t for layer in self.layers for t in layer.values()]

    def preactivations(self, E):
        """Per-layer inputs to the LeakyReLU, as plain arrays."""
        x = np.asarray(getattr(E, "data", E)).reshape(-1, self.widths[0])
        out = []
        for layer in self.layers:
            pre = x @ layer["weight"].data + layer["bias"].data
            out.append(pre)
            y = np.where(pre > 0, pre, self.slope * pre)
            d_in, d_out = layer["weight"].shape
            if self.mode == "base" or d_in != d_out:
                x = y
            else:
                x = y + (layer["p"].data * x if self.mode == "prl" else x)
        return out

    def __call__(self, E):
        x = T.reshape(E, (E.shape[0], self.widths[0]))
        for layer in self.layers:
            d_in, d_out = layer["weight"].shape
            mode = self.mode if d_in == d_out else "base"
            x = ffn_layer(x, layer["weight"], layer["bias"], self.slope, mode, layer.get("p"))
        return x
