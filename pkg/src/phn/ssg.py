"""Shared embedding, field self-attention and soft selection gating.

Tensors flowing through here are field matrices of shape
``(batch, fields, dim)``. Attention mixes fields within one sample only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError

TOWERS = ("ffn", "cross", "field")


class EmbeddingTable:
    """One trainable (vocab_size x dim) matrix per field, stored stacked.

    Row 0 of every field is the OOV/missing embedding and is trained like
    any other row.
    """

    def __init__(self, vocab_sizes, dim, rng, name="embedding"):
        self.vocab_sizes = [int(v) for v in vocab_sizes]
        self.dim = dim
        self.offsets = np.concatenate([[0], np.cumsum(self.vocab_sizes)[:-1]]).astype(np.int64)
        bound = 1.0 / math.sqrt(dim)
        self.weight = T.parameter(rng.uniform(-bound, bound, size=(sum(self.vocab_sizes), dim)), name=name)

    def field_rows(self, field_index):
        lo = self.offsets[field_index]
        return self.weight.data[lo: lo + self.vocab_sizes[field_index]]

    def parameters(self):
        return [self.weight]


def embed_lookup(indices, table: EmbeddingTable):
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != 2 or indices.shape[1] != len(table.vocab_sizes):
        raise ContractError(f"index batch shape {indices.shape} does not match {len(table.vocab_sizes)} fields")
    sizes = np.asarray(table.vocab_sizes)
    bad = (indices < 0) | (indices >= sizes[None, :])
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ContractError(f"index {indices[row, col]} out of range for field {col} (size {sizes[col]})")
    return T.take_rows(table.weight, indices + table.offsets[None, :])


class AttentionParams:
    def __init__(self, dim, head_count, rng, name="attention"):
        if head_count < 1 or dim % head_count:
            raise ConfigError(f"embedding dim {dim} is not divisible by head_count {head_count}")
        self.dim = dim
        self.head_count = head_count
        bound = 1.0 / math.sqrt(dim)
        self.w_q = T.parameter(rng.uniform(-bound, bound, (dim, dim)), name=f"{name}.w_q")
        self.w_k = T.parameter(rng.uniform(-bound, bound, (dim, dim)), name=f"{name}.w_k")
        self.w_v = T.parameter(rng.uniform(-bound, bound, (dim, dim)), name=f"{name}.w_v")

    @property
    def d_k(self):
        return self.dim // self.head_count

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v]


def self_attention(E, p: AttentionParams):
    """Multi-head scaled dot-product attention across the field axis.

    Projections are applied as ``E @ W``; scores are ``Q K^T / sqrt(d_k)``.
    """
    B, F, d = E.shape
    if d != p.dim:
        raise DimensionError(f"field matrix dim {d} does not match attention dim {p.dim}")
    h, dk = p.head_count, p.d_k

    def heads(x):
        return T.permute(T.reshape(x, (B, F, h, dk)), (0, 2, 1, 3))

    q = heads(T.matmul(E, p.w_q))
    k = heads(T.matmul(E, p.w_k))
    v = heads(T.matmul(E, p.w_v))
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
    weights = T.softmax_rows(scores)
    out = T.matmul(weights, v)
    return T.reshape(T.permute(out, (0, 2, 1, 3)), (B, F, d))


class SoftGate:
    """Free parameters ``theta``; the effective gate is ``sigmoid(theta)``."""

    def __init__(self, field_count, dim, name="gate"):
        self.theta = T.parameter(np.zeros((field_count, dim)), name=f"{name}.theta")

    def value(self):
        return T.sigmoid(self.theta)

    def parameters(self):
        return [self.theta]


def soft_select(E_se, E_sa, gate):
    """``gate * E_sa + (1 - gate) * E_se`` elementwise; ``gate`` broadcasts over the batch."""
    E_se, E_sa, gate = T.as_tensor(E_se), T.as_tensor(E_sa), T.as_tensor(gate)
    if E_se.shape != E_sa.shape:
        raise DimensionError(f"E_se {E_se.shape} and E_sa {E_sa.shape} differ")
    lead = E_se.data.ndim - gate.data.ndim
    if lead < 0 or gate.shape != E_se.shape[lead:]:
        raise DimensionError(f"gate {gate.shape} does not match feature shape {E_se.shape}")
    return T.add(T.mul(gate, E_sa), T.mul(T.sub(1.0, gate), E_se))


def scaling_ratio(E_sg, E_se, delta=1e-8):
    """Per-field mean of ``|E_sg| / (|E_se| + delta)``.

    ``E_sg`` is either one field matrix or a sequence of them (one per tower);
    the result has one row per tower.
    """
    se = np.abs(np.asarray(getattr(E_se, "data", E_se)))
    many = isinstance(E_sg, (list, tuple))
    rows = []
    for item in (E_sg if many else [E_sg]):
        sg = np.abs(np.asarray(getattr(item, "data", item)))
        if sg.shape != se.shape:
            raise DimensionError(f"E_sg {sg.shape} and E_se {se.shape} differ")
        rows.append((sg / (se + delta)).mean(axis=(0, 2)))
    return np.vstack(rows)


@dataclass(frozen=True)
class SelectionPattern:
    mode: str = "sg"
    attention_sharing: str = "private"
    gate_sharing: str = "public"

    def __post_init__(self):
        if self.mode not in ("embed", "sa", "sg"):
            raise ConfigError(f"selection mode must be embed, sa or sg, got {self.mode!r}")
        for name in ("attention_sharing", "gate_sharing"):
            if getattr(self, name) not in ("public", "private"):
                raise ConfigError(f"{name} must be public or private, got {getattr(self, name)!r}")

    @classmethod
    def parse(cls, text):
        """Parse labels such as ``embed``, ``Psa``, ``sa+sg`` or ``Psa+Psg``."""
        parts = text.split("+")
        if parts == ["embed"]:
            return cls("embed", "public", "public")
        share = {"sa": None, "sg": None}
        for part in parts:
            private = part.startswith("P")
            key = part[1:] if private else part
            if key not in share or share[key] is not None:
                raise ConfigError(f"cannot parse selection pattern {text!r}")
            share[key] = "private" if private else "public"
        if share["sa"] is None:
            raise ConfigError(f"selection pattern {text!r} needs a self-attention part")
        if share["sg"] is None:
            return cls("sa", share["sa"], "public")
        return cls("sg", share["sa"], share["sg"])

    @property
    def label(self):
        if self.mode == "embed":
            return "embed"
        sa = ("P" if self.attention_sharing == "private" else "") + "sa"
        if self.mode == "sa":
            return sa
        return sa + "+" + ("P" if self.gate_sharing == "private" else "") + "sg"


SELECTION_PATTERNS = ("embed", "sa", "Psa", "sa+sg", "Psa+sg", "sa+Psg", "Psa+Psg")


class SoftSelectionGating:
    """Produces one enhanced field matrix per tower according to a pattern."""

    def __init__(self, pattern: SelectionPattern, towers, field_count, dim, head_count, rng):
        self.pattern = pattern
        self.towers = tuple(towers)
        self.attention = {}
        self.gates = {}
        if pattern.mode == "embed":
            return
        if pattern.attention_sharing == "public":
            shared = AttentionParams(dim, head_count, rng, name="ssg.attention")
            self.attention = {t: shared for t in self.towers}
        else:
            self.attention = {t: AttentionParams(dim, head_count, rng, name=f"ssg.attention.{t}") for t in self.towers}
        if pattern.mode == "sg":
            if pattern.gate_sharing == "public":
                shared_gate = SoftGate(field_count, dim, name="ssg.gate")
                self.gates = {t: shared_gate for t in self.towers}
            else:
                self.gates = {t: SoftGate(field_count, dim, name=f"ssg.gate.{t}") for t in self.towers}

    def parameters(self):
        seen, out = set(), []
        for group in (self.attention, self.gates):
            for t in self.towers:
                if t in group and id(group[t]) not in seen:
                    seen.add(id(group[t]))
                    out.extend(group[t].parameters())
        return out

    def instance_count(self):
        return len({id(a) for a in self.attention.values()}), len({id(g) for g in self.gates.values()})

    def __call__(self, E_se):
        if self.pattern.mode == "embed":
            return {t: E_se for t in self.towers}
        attended = {}
        out = {}
        for t in self.towers:
            key = id(self.attention[t])
            if key not in attended:
                attended[key] = self_attention(E_se, self.attention[t])
            E_sa = attended[key]
            if self.pattern.mode == "sa":
                out[t] = E_sa
            else:
                out[t] = soft_select(E_se, E_sa, self.gates[t].value())
        return out
