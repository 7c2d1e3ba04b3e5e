"""Weak-gradient and soft-gating diagnostics with stable text exports.

Report files start with a block of ``# key: value`` lines followed by a
tab-separated table whose columns never change between configurations;
values that do not apply are left empty.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, UnsupportedConfigError
from .model import tower_logit_decomposition
from .ssg import TOWERS, scaling_ratio
from .tensor import _stable_sigmoid
from .training import predict

SCHEMA_VERSION = 1
REPORT_COLUMNS = (
    "sample", "label", "logit", "prob", "sigma_prime", "interval",
    "partial_ffn", "partial_cross", "partial_field", "bias",
)
DUMP_COLUMNS = (
    "group_rank", "label", "sample", "logit", "prob",
    "partial_ffn", "partial_cross", "partial_field", "bias",
    "conf_ffn", "conf_cross", "conf_field",
)
SUMMARY_COLUMNS = (
    "config", "samples", "weak_fraction", "weak_fraction_pos", "weak_fraction_neg",
    "mean_sigma_prime", "mean_pos_conf", "mean_neg_conf",
)


@dataclass(frozen=True)
class GradientIntervalSpec:
    """Samples whose sigmoid slope ``s(1 - s)`` falls below ``epsilon`` are 'weak'."""

    epsilon: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.25:
            raise ConfigError(f"epsilon must lie in (0, 0.25), got {self.epsilon}")

    @property
    def boundary(self):
        """|z*| where sigma(z*)(1 - sigma(z*)) = epsilon."""
        s = (1.0 + math.sqrt(1.0 - 4.0 * self.epsilon)) / 2.0
        return math.log(s / (1.0 - s))


def sigma_prime(z):
    s = _stable_sigmoid(np.asarray(z, dtype=np.float64))
    return s * (1.0 - s)


def classify_interval(z, spec: GradientIntervalSpec = GradientIntervalSpec()):
    """'weak' or 'effective' for a scalar logit; arrays give an array of labels."""
    weak = sigma_prime(z) < spec.epsilon
    if np.ndim(weak) == 0:
        return "weak" if weak else "effective"
    return np.where(weak, "weak", "effective")


def seeded_sample_ids(n, sample_count, seed):
    if sample_count > n:
        raise ContractError(f"need {sample_count} samples but the eval batch has only {n}")
    return np.sort(np.random.default_rng(seed).permutation(n)[:sample_count])


@dataclass
class DiagnosticsReport:
    name: str
    sample_ids: np.ndarray
    labels: np.ndarray
    logits: np.ndarray
    parts: dict | None = None
    bias: float | None = None
    spec: GradientIntervalSpec = field(default_factory=GradientIntervalSpec)
    meta: dict = field(default_factory=dict)

    @property
    def probs(self):
        return _stable_sigmoid(self.logits)

    @property
    def sigma_prime(self):
        return sigma_prime(self.logits)

    @property
    def weak(self):
        return self.sigma_prime < self.spec.epsilon

    def summary_row(self):
        pos = self.labels == 1
        weak, p = self.weak, self.probs

        def frac(mask):
            return float(weak[mask].mean()) if mask.any() else float("nan")

        return {
            "config": self.name,
            "samples": int(len(self.labels)),
            "weak_fraction": float(weak.mean()),
            "weak_fraction_pos": frac(pos),
            "weak_fraction_neg": frac(~pos),
            "mean_sigma_prime": float(self.sigma_prime.mean()),
            "mean_pos_conf": float(p[pos].mean()) if pos.any() else float("nan"),
            "mean_neg_conf": float(p[~pos].mean()) if (~pos).any() else float("nan"),
        }


def build_report(name, model, batch, spec=GradientIntervalSpec(), sample_ids=None, meta=None):
    """Per-sample diagnostics of ``model`` on ``batch`` (optionally a subset of rows)."""
    ids = np.arange(len(batch)) if sample_ids is None else np.asarray(sample_ids)
    sub = batch.subset(ids)
    parts, bias = None, None
    try:
        dec = tower_logit_decomposition(model, sub)
        logits, parts, bias = dec.logits, dec.parts, dec.bias
    except UnsupportedConfigError:
        logits = predict(model, sub)
    return DiagnosticsReport(name, ids, sub.labels.copy(), logits, parts, bias, spec, dict(meta or {}))


def report_from_logits(name, labels, logits, sample_ids, spec=GradientIntervalSpec(), meta=None,
                       parts=None, bias=None):
    return DiagnosticsReport(name, np.asarray(sample_ids), np.asarray(labels, dtype=np.float64),
                             np.asarray(logits, dtype=np.float64), parts, bias, spec, dict(meta or {}))


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    return repr(float(x))


def _header_lines(meta):
    lines = [f"# schema_version: {SCHEMA_VERSION}"]
    for key in sorted(meta):
        value = meta[key]
        if not isinstance(value, str):
            value = json.dumps(value, sort_keys=True)
        lines.append(f"# {key}: {value}")
    return lines


def write_report(path, report: DiagnosticsReport):
    meta = {
        "config_name": report.name,
        "epsilon": report.spec.epsilon,
        "weak_boundary_abs_z": report.spec.boundary,
        "epsilon_note": "reader-chosen threshold on sigma'(z)",
        "decomposition": "supported" if report.parts is not None else "unsupported",
        **report.meta,
    }
    intervals = classify_interval(report.logits, report.spec)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(_header_lines(meta)) + "\n")
        fh.write("\t".join(REPORT_COLUMNS) + "\n")
        for i in range(len(report.labels)):
            partial = [report.parts.get(t)[i] if report.parts and t in report.parts else None for t in TOWERS]
            row = [str(int(report.sample_ids[i])), str(int(report.labels[i])), _fmt(report.logits[i]),
                   _fmt(report.probs[i]), _fmt(report.sigma_prime[i]), str(np.atleast_1d(intervals)[i]),
                   *(_fmt(v) for v in partial), _fmt(report.bias)]
            fh.write("\t".join(row) + "\n")


def read_table(path):
    """Returns ``(meta, columns, rows)`` for any report file written here."""
    meta, columns, rows = {}, None, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                meta[key] = value
            elif columns is None:
                columns = tuple(line.split("\t"))
            else:
                rows.append(line.split("\t"))
    return meta, columns, rows


# ---------------------------------------------------------------------------
# Activation dumps and summaries
# ---------------------------------------------------------------------------


@dataclass
class ActivationDump:
    name: str
    rows: list
    meta: dict


def activation_dump(model, batch, sample_count=200, seed=0, spec=GradientIntervalSpec(), name="model", meta=None):
    """Confidence curves on ``sample_count`` seeded eval samples.

    Samples are grouped by label (negatives first) and sorted within each
    group by the full-model probability.
    """
    ids = seeded_sample_ids(len(batch), sample_count, seed)
    report = build_report(name, model, batch, spec, ids, meta)
    return dump_from_report(report, seed)


def dump_from_report(report: DiagnosticsReport, seed=0):
    p = report.probs
    rows = []
    for label in (0, 1):
        members = np.flatnonzero(report.labels == label)
        members = members[np.argsort(p[members], kind="mergesort")]
        for rank, i in enumerate(members):
            partial = {t: (report.parts[t][i] if report.parts and t in report.parts else None) for t in TOWERS}
            conf = {
                t: (float(_stable_sigmoid(partial[t] + report.bias)) if partial[t] is not None else None)
                for t in TOWERS
            }
            rows.append({
                "group_rank": rank, "label": label, "sample": int(report.sample_ids[i]),
                "logit": float(report.logits[i]), "prob": float(p[i]),
                **{f"partial_{t}": partial[t] for t in TOWERS},
                "bias": report.bias,
                **{f"conf_{t}": conf[t] for t in TOWERS},
            })
    meta = {"config_name": report.name, "sample_count": len(report.labels), "selection_seed": seed,
            "epsilon": report.spec.epsilon, **report.meta}
    return ActivationDump(report.name, rows, meta)


def write_activation_dump(path, dump: ActivationDump):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(_header_lines(dump.meta)) + "\n")
        fh.write("\t".join(DUMP_COLUMNS) + "\n")
        for r in dump.rows:
            fh.write("\t".join(str(r[c]) if c in ("group_rank", "label", "sample") else _fmt(r[c])
                               for c in DUMP_COLUMNS) + "\n")


def weak_gradient_summary(reports):
    """One comparison row per report; all reports must cover the same samples."""
    reports = list(reports.values()) if isinstance(reports, dict) else list(reports)
    if not reports:
        return []
    ref = reports[0]
    for r in reports[1:]:
        if not (np.array_equal(r.sample_ids, ref.sample_ids) and np.array_equal(r.labels, ref.labels)):
            raise ContractError(f"report {r.name!r} covers different samples than {ref.name!r}")
    return [r.summary_row() for r in reports]


def write_summary(path, rows, meta=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(_header_lines(meta or {})) + "\n")
        fh.write("\t".join(SUMMARY_COLUMNS) + "\n")
        for r in rows:
            fh.write("\t".join(str(r[c]) if c in ("config", "samples") else _fmt(r[c]) for c in SUMMARY_COLUMNS) + "\n")


# ---------------------------------------------------------------------------
# Gate scaling ratios
# ---------------------------------------------------------------------------


def ssg_scaling_ratios(model, batch):
    """(towers x fields) mean |E_sg| / |E_se| for each tower's gated input."""
    parts = model.forward_parts(batch, training=False)
    towers = list(parts["tower_inputs"])
    matrix = scaling_ratio([parts["tower_inputs"][t] for t in towers], parts["E_se"])
    return towers, matrix


def write_scaling_ratio(path, towers, matrix, meta=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(_header_lines(meta or {})) + "\n")
        fh.write("\t".join(["tower"] + [f"field_{i + 1}" for i in range(matrix.shape[1])]) + "\n")
        for t, row in zip(towers, matrix):
            fh.write("\t".join([t] + [_fmt(v) for v in row]) + "\n")
