"""Metrics, the mini-batch training loop and the depth grid search."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .data import EncodedBatch
from .errors import ConfigError, DivergenceError, PhnError, UndefinedMetricError
from .model import MODEL_KINDS, logloss, logloss_value
from .optim import make_optimizer


# ---------------------------------------------------------------------------
# AUC
# ---------------------------------------------------------------------------


def _check_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores ({scores.size}) and labels ({labels.size}) differ in length")
    pos = labels == 1
    if pos.all() or not pos.any():
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    return scores, pos


def average_ranks(values):
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], len(values)]
    mean_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(values))
    ranks[order] = np.repeat(mean_rank, ends - starts)
    return ranks


def auc(scores, labels):
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie)."""
    scores, pos = _check_labels(scores, labels)
    n_pos = int(pos.sum())
    n_neg = len(scores) - n_pos
    rank_sum = average_ranks(scores)[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_naive(scores, labels):
    """Brute-force AUC over every positive/negative pair."""
    scores, pos = _check_labels(scores, labels)
    wins = 0.0
    positives, negatives = scores[pos], scores[~pos]
    for s in positives:
        wins += np.count_nonzero(s > negatives) + 0.5 * np.count_nonzero(s == negatives)
    return float(wins / (len(positives) * len(negatives)))


def safe_auc(scores, labels):
    try:
        return auc(scores, labels)
    except UndefinedMetricError:
        return float("nan")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 5
    batch_size: int = 256
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 2
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1 or self.patience < 1:
            raise ConfigError("TrainSpec: epochs, batch_size, eval_every and patience must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"TrainSpec.optimizer must be sgd or adam, got {self.optimizer!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class MetricRecord:
    epoch: int
    split: str
    logloss: float
    auc: float
    wall_time: float


METRIC_COLUMNS = ("epoch", "split", "logloss", "auc", "wall_time")


def predict(model, batch: EncodedBatch, chunk=8192):
    """Eval-mode logits for a whole batch, computed in chunks."""
    out = []
    for lo in range(0, len(batch), chunk):
        z, _ = model.forward(batch.indices[lo: lo + chunk], training=False)
        out.append(z.data)
    return np.concatenate(out)


def evaluate(model, batch: EncodedBatch):
    """Returns ``(logloss, auc, probabilities)`` in eval mode."""
    z = predict(model, batch)
    p = T._stable_sigmoid(z)
    return logloss_value(p, batch.labels), safe_auc(p, batch.labels), p


def _uses_bn(model):
    return getattr(getattr(model, "config", None), "bn", "none") != "none"


def train(model, train_batch: EncodedBatch, val_batch: EncodedBatch, spec: TrainSpec, progress=None):
    """Mini-batch training with per-epoch shuffling and early stopping on val logloss.

    The model is left holding the parameters of the best validation epoch.
    Returns ``(model, records)``.
    """
    if _uses_bn(model) and spec.batch_size < 2:
        raise ConfigError("batch_size must be >= 2 when batch normalization is active")
    params = model.parameters()
    opt = make_optimizer(
        spec.optimizer, params, spec.learning_rate,
        **({"beta1": spec.beta1, "beta2": spec.beta2, "eps": spec.adam_eps} if spec.optimizer == "adam" else {}),
    )
    rng = np.random.default_rng(spec.seed)
    records = []
    start = time.perf_counter()
    best_loss, best_state, bad_evals = math.inf, None, 0
    n = len(train_batch)
    min_batch = 2 if _uses_bn(model) else 1
    step = 0
    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(n)
        for lo in range(0, n, spec.batch_size):
            rows = order[lo: lo + spec.batch_size]
            if len(rows) < min_batch:
                continue
            opt.zero_grad()
            _, prob = model.forward(train_batch.indices[rows], training=True)
            loss = logloss(prob, train_batch.labels[rows])
            value = loss.item()
            step += 1
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, step {step}",
                    {"epoch": epoch, "step": step, "loss": value,
                     "last_records": [asdict(r) for r in records[-3:]]},
                )
            T.backward(loss)
            opt.step()

        if epoch % spec.eval_every and epoch != spec.epochs:
            continue
        tr_loss, tr_auc, _ = evaluate(model, train_batch)
        va_loss, va_auc, _ = evaluate(model, val_batch)
        now = time.perf_counter() - start
        records.append(MetricRecord(epoch, "train", tr_loss, tr_auc, now))
        records.append(MetricRecord(epoch, "val", va_loss, va_auc, now))
        if progress is not None:
            progress(records[-2:])
        if not math.isfinite(va_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", {"epoch": epoch})
        if va_loss < best_loss:
            best_loss, bad_evals = va_loss, 0
            best_state = {k: v.copy() for k, v in model.named_state()}
        else:
            bad_evals += 1
            if bad_evals >= spec.patience:
                break
    if best_state is not None:
        model.load_state(best_state)
    return model, records


def build_model(kind, config):
    model_cls, _ = MODEL_KINDS[kind]
    return model_cls(config)


def best_record(records, split="val"):
    rows = [r for r in records if r.split == split]
    return min(rows, key=lambda r: (r.logloss, r.epoch)) if rows else None


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


class GridCellError(PhnError):
    def __init__(self, depth, cause):
        super().__init__(f"grid cell with {depth} layers failed: {cause}")
        self.depth = depth
        self.cause = cause


def _grid_cell(args):
    config, depth, train_batch, val_batch, spec = args
    try:
        model = build_model("phn", config.with_depth(depth))
        model, records = train(model, train_batch, val_batch, spec)
        va_loss, va_auc, _ = evaluate(model, val_batch)
    except Exception as exc:  # tagged and re-raised by the caller
        raise GridCellError(depth, exc) from exc
    best = best_record(records)
    return {
        "layers": depth,
        "val_logloss": va_loss,
        "val_auc": va_auc,
        "best_epoch": best.epoch if best else 0,
        "parameter_count": model.parameter_count(),
        "records": records,
    }


def grid_search(base_config, layer_counts, train_batch, val_batch, spec: TrainSpec, jobs=1):
    """Retrain from scratch for every depth (all towers set to it); rows sorted by depth."""
    layer_counts = sorted(set(int(x) for x in layer_counts))
    if not layer_counts:
        raise ConfigError("grid_search needs at least one layer count")
    cells = [(base_config, depth, train_batch, val_batch, spec) for depth in layer_counts]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_grid_cell, cells))
    else:
        rows = [_grid_cell(c) for c in cells]
    return sorted(rows, key=lambda r: r["layers"])


# ---------------------------------------------------------------------------
# Metric files
# ---------------------------------------------------------------------------


def format_float(x):
    return repr(float(x))


def write_metrics(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(METRIC_COLUMNS) + "\n")
        for r in records:
            fh.write(
                "\t".join([str(r.epoch), r.split, format_float(r.logloss), format_float(r.auc),
                           f"{r.wall_time:.3f}"]) + "\n"
            )


def read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != METRIC_COLUMNS:
            raise ValueError(f"unexpected metric header {header}")
        out = []
        for line in fh:
            e, s, ll, a, w = line.rstrip("\n").split("\t")
            out.append(MetricRecord(int(e), s, float(ll), float(a), float(w)))
    return out
