"""End-to-end PHN model, the LR baseline, loss, logit decomposition and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .data import EncodedBatch
from .errors import ConfigError, ContractError, DimensionError, UnsupportedConfigError
from .ssg import TOWERS, EmbeddingTable, SelectionPattern, SoftSelectionGating, embed_lookup
from .towers import RESIDUAL_MODES, CrossTower, FfnTower, FieldInteractionTower, ffn_widths

BN_MODES = ("none", "public", "private")
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    vocab_sizes: tuple
    embedding_dim: int = 8
    cross_layers: int = 3
    field_layers: int = 3
    ffn_layers: int = 3
    residual: str = "prl"
    bn: str = "none"
    selection: str = "Psa+sg"
    head_count: int = 1
    slope: float = 0.01
    seed: int = 0
    towers: tuple = TOWERS
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))
        object.__setattr__(self, "towers", tuple(self.towers))
        self.validate()

    def validate(self):
        problems = []
        if not self.vocab_sizes or any(v < 1 for v in self.vocab_sizes):
            problems.append("vocab_sizes: need at least one field, every size >= 1")
        if self.embedding_dim < 1:
            problems.append("embedding_dim: must be >= 1")
        for name in ("cross_layers", "field_layers", "ffn_layers"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.residual not in RESIDUAL_MODES:
            problems.append(f"residual: expected one of {RESIDUAL_MODES}")
        if self.bn not in BN_MODES:
            problems.append(f"bn: expected one of {BN_MODES}")
        try:
            SelectionPattern.parse(self.selection)
        except ConfigError as exc:
            problems.append(f"selection: {exc}")
        if self.head_count < 1 or self.embedding_dim % self.head_count:
            problems.append("head_count: must divide embedding_dim")
        if not 0.0 < self.slope < 1.0:
            problems.append("slope: must lie in (0, 1)")
        if not self.towers or any(t not in TOWERS for t in self.towers) or len(set(self.towers)) != len(self.towers):
            problems.append(f"towers: non-empty, unique subset of {TOWERS}")
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def field_count(self):
        return len(self.vocab_sizes)

    @property
    def pattern(self):
        return SelectionPattern.parse(self.selection)

    def with_depth(self, layers):
        return replace(self, cross_layers=layers, field_layers=layers, ffn_layers=layers)

    def to_dict(self):
        d = asdict(self)
        d["vocab_sizes"] = list(self.vocab_sizes)
        d["towers"] = list(self.towers)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


class PhnModel:
    kind = "phn"

    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        F, d = cfg.field_count, cfg.embedding_dim
        n = F * d
        self.embedding = EmbeddingTable(cfg.vocab_sizes, d, rng)
        self.ssg = SoftSelectionGating(cfg.pattern, cfg.towers, F, d, cfg.head_count, rng)
        self.towers = {}
        for t in TOWERS:
            if t not in cfg.towers:
                continue
            if t == "ffn":
                self.towers[t] = FfnTower(ffn_widths(n, d, cfg.ffn_layers), cfg.residual, cfg.slope, rng)
            elif t == "cross":
                self.towers[t] = CrossTower(n, cfg.cross_layers, cfg.residual, rng)
            else:
                self.towers[t] = FieldInteractionTower(F, d, cfg.field_layers, cfg.residual, rng)
        self.tower_dims = {t: tower.output_dim for t, tower in self.towers.items()}
        total = sum(self.tower_dims.values())

        self.bn = {}
        if cfg.bn == "public":
            self.bn["public"] = self._bn_unit("public", total)
        elif cfg.bn == "private":
            for t, width in self.tower_dims.items():
                self.bn[t] = self._bn_unit(t, width)

        bound = 1.0 / np.sqrt(total)
        self.head_w = T.parameter(rng.uniform(-bound, bound, (total, 1)), name="head.w")
        self.head_b = T.parameter(np.zeros(1), name="head.b")

    def _bn_unit(self, key, width):
        return {
            "gamma": T.parameter(np.ones(width), name=f"bn.{key}.gamma"),
            "beta": T.parameter(np.zeros(width), name=f"bn.{key}.beta"),
            "state": T.BatchNormState.fresh(width, self.config.bn_momentum, self.config.bn_eps),
        }

    # -- parameters and state ------------------------------------------------

    def parameters(self):
        params = list(self.embedding.parameters()) + self.ssg.parameters()
        for tower in self.towers.values():
            params.extend(tower.parameters())
        for unit in self.bn.values():
            params.extend([unit["gamma"], unit["beta"]])
        params.extend([self.head_w, self.head_b])
        return params

    def parameter_count(self):
        return int(sum(p.size for p in self.parameters()))

    def named_state(self):
        """Ordered (name, array) pairs: every parameter plus BN running statistics."""
        out = [(p.name, p.data) for p in self.parameters()]
        for key, unit in self.bn.items():
            out.append((f"bn.{key}.running_mean", unit["state"].running_mean))
            out.append((f"bn.{key}.running_var", unit["state"].running_var))
        return out

    def load_state(self, state):
        params = {p.name: p for p in self.parameters()}
        for name, arr in state.items():
            if name in params:
                if params[name].shape != arr.shape:
                    raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model {params[name].shape}")
                params[name].data = np.array(arr, dtype=np.float64, copy=True)
            elif name.startswith("bn.") and name.rsplit(".", 1)[1] in ("running_mean", "running_var"):
                key, stat = name[3:].rsplit(".", 1)
                setattr(self.bn[key]["state"], stat, np.array(arr, dtype=np.float64, copy=True))
            else:
                raise ContractError(f"checkpoint entry {name!r} has no place in this model")

    # -- forward ---------------------------------------------------------------

    def _indices(self, batch):
        indices = batch.indices if isinstance(batch, EncodedBatch) else np.asarray(batch, dtype=np.int64)
        if indices.ndim != 2 or indices.shape[1] != self.config.field_count:
            raise ContractError(
                f"batch has shape {indices.shape}, model expects (batch, {self.config.field_count})"
            )
        sizes = np.asarray(self.config.vocab_sizes)
        if np.any(indices < 0) or np.any(indices >= sizes[None, :]):
            raise ContractError("batch indices exceed the model's vocabulary sizes")
        return indices

    def forward_parts(self, batch, training=False):
        indices = self._indices(batch)
        B = indices.shape[0]
        E_se = embed_lookup(indices, self.embedding)
        inputs = self.ssg(E_se)
        outputs = {t: tower(inputs[t]) for t, tower in self.towers.items()}
        if self.config.bn == "private":
            outputs = {
                t: T.batch_norm(x, self.bn[t]["gamma"], self.bn[t]["beta"], self.bn[t]["state"], training)
                for t, x in outputs.items()
            }
        head_input = T.concat(list(outputs.values()), axis=1) if len(outputs) > 1 else next(iter(outputs.values()))
        if self.config.bn == "public":
            unit = self.bn["public"]
            head_input = T.batch_norm(head_input, unit["gamma"], unit["beta"], unit["state"], training)
        z = T.reshape(T.add(T.matmul(head_input, self.head_w), self.head_b), (B,))
        return {"E_se": E_se, "tower_inputs": inputs, "tower_outputs": outputs, "head_input": head_input, "z": z}

    def forward(self, batch, training=False):
        z = self.forward_parts(batch, training)["z"]
        return z, T.sigmoid(z)


def build(config: ModelConfig) -> PhnModel:
    return PhnModel(config)


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count of ``PhnModel(config)``.

    embedding  sum(vocab) * d
    attention  3 d^2 per instance (1 if public, one per tower if private; 0 for embed)
    gate       F d per instance (only for sg patterns)
    cross      per layer n^2 + 2n, plus n for prl           (n = F d)
    field      per layer F^2 + F, plus F d for prl
    ffn        per layer in*out + out, plus out for prl when in == out
    bn         2 * width per instance
    head       total tower width + 1
    """
    F, d = config.field_count, config.embedding_dim
    n = F * d
    k = len(config.towers)
    pattern = config.pattern
    prl = config.residual == "prl"
    count = sum(config.vocab_sizes) * d
    if pattern.mode != "embed":
        count += 3 * d * d * (1 if pattern.attention_sharing == "public" else k)
    if pattern.mode == "sg":
        count += F * d * (1 if pattern.gate_sharing == "public" else k)
    widths = {}
    if "cross" in config.towers:
        count += config.cross_layers * (n * n + 2 * n + (n if prl else 0))
        widths["cross"] = n
    if "field" in config.towers:
        count += config.field_layers * (F * F + F + (n if prl else 0))
        widths["field"] = n
    if "ffn" in config.towers:
        ws = ffn_widths(n, d, config.ffn_layers)
        for a, b in zip(ws[:-1], ws[1:]):
            count += a * b + b + (b if prl and a == b else 0)
        widths["ffn"] = ws[-1]
    total = sum(widths.values())
    if config.bn != "none":
        count += 2 * total
    return count + total + 1


# ---------------------------------------------------------------------------
# Linear baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearConfig:
    vocab_sizes: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "vocab_sizes", tuple(int(v) for v in self.vocab_sizes))

    @property
    def field_count(self):
        return len(self.vocab_sizes)

    def to_dict(self):
        return {"vocab_sizes": list(self.vocab_sizes), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class LinearModel:
    """Logistic regression: one scalar weight per (field, token) plus a bias."""

    kind = "linear"

    def __init__(self, config: LinearConfig):
        self.config = config
        self.table = EmbeddingTable(config.vocab_sizes, 1, np.random.default_rng(config.seed), name="linear.w")
        self.table.weight.data[:] = 0.0
        self.bias = T.parameter(np.zeros(1), name="linear.b")

    def parameters(self):
        return [self.table.weight, self.bias]

    def named_state(self):
        return [(p.name, p.data) for p in self.parameters()]

    def load_state(self, state):
        for p in self.parameters():
            p.data = np.array(state[p.name], dtype=np.float64, copy=True)

    def forward(self, batch, training=False):
        indices = batch.indices if isinstance(batch, EncodedBatch) else np.asarray(batch)
        weights = embed_lookup(indices, self.table)  # (B, F, 1)
        z = T.add(T.reshape(T.sum(weights, axis=1), (indices.shape[0],)), self.bias)
        return z, T.sigmoid(z)


MODEL_KINDS = {"phn": (PhnModel, ModelConfig), "linear": (LinearModel, LinearConfig)}


# ---------------------------------------------------------------------------
# Loss and decomposition
# ---------------------------------------------------------------------------


def logloss(probability, labels):
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    probability = T.as_tensor(probability)
    labels = np.asarray(labels, dtype=np.float64)
    if probability.shape != labels.shape:
        raise DimensionError(f"probability shape {probability.shape} != labels shape {labels.shape}")
    p = T.clip(probability, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = T.add(T.mul(labels, T.log(p)), T.mul(1.0 - labels, T.log(T.sub(1.0, p))))
    return T.mul(T.mean(ll), -1.0)


def logloss_value(probability, labels):
    p = np.clip(np.asarray(probability, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"probability shape {p.shape} != labels shape {y.shape}")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


@dataclass
class LogitDecomposition:
    parts: dict
    bias: float
    logits: np.ndarray

    def total(self):
        return sum(self.parts.values()) + self.bias


def tower_logit_decomposition(model: PhnModel, batch) -> LogitDecomposition:
    """Split the eval-mode logit into each tower's share of the linear head plus the bias."""
    if getattr(model, "kind", None) != "phn":
        raise UnsupportedConfigError("logit decomposition needs a PHN model")
    if model.config.bn == "public":
        raise UnsupportedConfigError("public BN mixes towers before the head; decomposition undefined")
    out = model.forward_parts(batch, training=False)
    w = model.head_w.data[:, 0]
    parts, lo = {}, 0
    for t, x in out["tower_outputs"].items():
        width = model.tower_dims[t]
        parts[t] = x.data @ w[lo: lo + width]
        lo += width
    return LogitDecomposition(parts, float(model.head_b.data[0]), out["z"].data.copy())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"PHNCKPT1"


def checkpoint_bytes(model, extra=None) -> bytes:
    """Self-describing container: magic, header length, JSON header, raw float64 buffers."""
    entries, blobs, offset = [], [], 0
    for name, arr in model.named_state():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "tensors": entries,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return _MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)


def save_checkpoint(model, path, extra=None) -> str:
    data = checkpoint_bytes(model, extra)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path):
    """Returns ``(header, {name: array})``."""
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), source=str(path))


def parse_checkpoint(blob: bytes, source="<bytes>"):
    if blob[:8] != _MAGIC:
        raise ContractError(f"{source} is not a PHN checkpoint")
    (length,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16: 16 + length].decode("utf-8"))
    body = blob[16 + length:]
    arrays = {}
    for e in header["tensors"]:
        raw = body[e["offset"]: e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return header, arrays


def load_checkpoint(path):
    return _materialize(*read_checkpoint(path))


def model_from_bytes(blob: bytes):
    return _materialize(*parse_checkpoint(blob))


def _materialize(header, arrays):
    model_cls, config_cls = MODEL_KINDS[header["kind"]]
    model = model_cls(config_cls.from_dict(header["config"]))
    model.load_state(arrays)
    return model


def checkpoint_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def clone(model):
    model_cls, config_cls = MODEL_KINDS[model.kind]
    other = model_cls(model.config)
    other.load_state(dict(model.named_state()))
    return other
