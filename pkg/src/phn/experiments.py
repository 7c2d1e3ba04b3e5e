"""Configuration matrices and the desk-scale diagnostics protocol.

``run_diagnose`` trains every configuration of a matrix file, then writes
per-config weak-gradient reports, matrix summaries with the reference
orderings, 200-sample activation dumps and the gate scaling-ratio matrix.
Configurations that resolve to the same model and training spec are trained
once and shared.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from .data import EncodedBatch
from .diagnostics import (
    GradientIntervalSpec,
    _fmt,
    _header_lines,
    build_report,
    dump_from_report,
    report_from_logits,
    seeded_sample_ids,
    ssg_scaling_ratios,
    weak_gradient_summary,
    write_activation_dump,
    write_report,
    write_scaling_ratio,
    write_summary,
)
from .errors import ConfigError
from .model import ModelConfig, checkpoint_bytes, model_from_bytes, save_checkpoint
from .ssg import SELECTION_PATTERNS, TOWERS
from .training import TrainSpec, best_record, build_model, evaluate, predict, train

# Full-scale Criteo test AUCs, carried only to report how the desk-scale
# ordering compares. Never used as a pass/fail threshold.
RESIDUAL_BN_GRID = {
    "base": ({"residual": "base", "bn": "none"}, 0.811914),
    "rl": ({"residual": "rl", "bn": "none"}, 0.812111),
    "prl": ({"residual": "prl", "bn": "none"}, 0.812428),
    "base+bn": ({"residual": "base", "bn": "public"}, 0.811879),
    "rl+bn": ({"residual": "rl", "bn": "public"}, 0.810359),
    "prl+bn": ({"residual": "prl", "bn": "public"}, 0.811711),
    "base+pbn": ({"residual": "base", "bn": "private"}, 0.811865),
    "rl+pbn": ({"residual": "rl", "bn": "private"}, 0.809268),
    "prl+pbn": ({"residual": "prl", "bn": "private"}, 0.811813),
}
SELECTION_GRID = {
    "embed": ({"selection": "embed"}, 0.811647),
    "sa": ({"selection": "sa"}, 0.810525),
    "Psa": ({"selection": "Psa"}, 0.810554),
    "sa+sg": ({"selection": "sa+sg"}, 0.811782),
    "Psa+sg": ({"selection": "Psa+sg"}, 0.811902),
    "sa+Psg": ({"selection": "sa+Psg"}, 0.811771),
    "Psa+Psg": ({"selection": "Psa+Psg"}, 0.811595),
}
assert tuple(SELECTION_GRID) == SELECTION_PATTERNS

# Separately trained single towers, plus the joint model under each residual mode.
ACTIVATION_MODELS = {
    "tower_ffn": {"towers": ["ffn"], "residual": "base"},
    "tower_cross": {"towers": ["cross"], "residual": "base"},
    "tower_field": {"towers": ["field"], "residual": "base"},
    "phn": {"residual": "base"},
    "phn_rl": {"residual": "rl"},
    "phn_prl": {"residual": "prl"},
}
SUMMED_NAME = "towers_summed"
ACTIVATION_ORDER = ("tower_ffn", "tower_cross", "tower_field", SUMMED_NAME, "phn", "phn_rl", "phn_prl")

MATRIX_COLUMNS = (
    "config", "val_logloss", "val_auc", "test_logloss", "test_auc", "weak_fraction",
    "mean_sigma_prime", "parameter_count", "best_epoch", "rank", "reference_auc", "reference_rank",
)


def default_matrix():
    """The built-in matrix document (same layout as a matrix file)."""
    def group(table):
        return {name: {"overrides": o, "reference_auc": ref} for name, (o, ref) in table.items()}

    return {"groups": {"residual_bn": group(RESIDUAL_BN_GRID), "selection": group(SELECTION_GRID)}}


def load_matrix(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    validate_matrix(doc)
    return doc


def validate_matrix(doc):
    groups = doc.get("groups") if isinstance(doc, dict) else None
    if not isinstance(groups, dict) or not groups:
        raise ConfigError("matrix file needs a non-empty 'groups' object")
    for gname, cells in groups.items():
        if not isinstance(cells, dict) or not cells:
            raise ConfigError(f"matrix group {gname!r} has no configurations")
        for cname, cell in cells.items():
            extra = set(cell) - {"overrides", "reference_auc"}
            if extra:
                raise ConfigError(f"matrix cell {gname}/{cname}: unknown keys {sorted(extra)}")
            if os.sep in cname or cname in ("", ".", ".."):
                raise ConfigError(f"matrix cell name {cname!r} is not a valid file stem")


def resolve_config(base: ModelConfig, overrides) -> ModelConfig:
    d = base.to_dict()
    unknown = set(overrides) - set(d)
    if unknown:
        raise ConfigError(f"unknown ModelConfig overrides {sorted(unknown)}")
    d.update(overrides)
    return ModelConfig.from_dict(d)


# ---------------------------------------------------------------------------
# Training jobs
# ---------------------------------------------------------------------------


def _job_key(config: ModelConfig, spec: TrainSpec):
    return json.dumps({"model": config.to_dict(), "train": spec.to_dict()}, sort_keys=True)


def _train_job(args):
    config, spec, train_batch, val_batch = args
    model = build_model("phn", config)
    model, records = train(model, train_batch, val_batch, spec)
    return checkpoint_bytes(model), records


def train_jobs(jobs, train_batch, val_batch, workers=1):
    """Train each unique ``(config, spec)``; returns key -> (model, records)."""
    keys = list(jobs)
    args = [(jobs[k][0], jobs[k][1], train_batch, val_batch) for k in keys]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_job, args))
    else:
        results = [_train_job(a) for a in args]
    return {k: (model_from_bytes(blob), records) for k, (blob, records) in zip(keys, results)}


# ---------------------------------------------------------------------------
# The protocol
# ---------------------------------------------------------------------------


def _rank_desc(values, names):
    """1-based ranks, highest value first; ties broken by name."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], names[i]))
    ranks = [0] * len(values)
    for r, i in enumerate(order, start=1):
        ranks[i] = r
    return ranks


def spearman(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def write_matrix_summary(path, rows, meta):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(_header_lines(meta)) + "\n")
        fh.write("\t".join(MATRIX_COLUMNS) + "\n")
        for r in rows:
            out = []
            for c in MATRIX_COLUMNS:
                v = r[c]
                out.append(v if isinstance(v, str) else str(v) if isinstance(v, int) else _fmt(v))
            fh.write("\t".join(out) + "\n")


def run_diagnose(out_dir, base_config: ModelConfig, train_spec: TrainSpec, train_batch: EncodedBatch,
                 val_batch: EncodedBatch, test_batch: EncodedBatch, matrix=None, epsilon=0.05,
                 sample_count=200, sample_seed=0, activation_epochs=1, workers=1, meta=None):
    """Run the whole protocol; returns a manifest of written files relative to ``out_dir``."""
    matrix = matrix or default_matrix()
    validate_matrix(matrix)
    spec = GradientIntervalSpec(epsilon)
    meta = dict(meta or {})
    activation_spec = replace(train_spec, epochs=activation_epochs)
    sample_ids = seeded_sample_ids(len(test_batch), sample_count, sample_seed)

    cells, jobs = {}, {}
    for gname, group in matrix["groups"].items():
        for cname, cell in group.items():
            config = resolve_config(base_config, cell.get("overrides", {}))
            key = _job_key(config, train_spec)
            jobs[key] = (config, train_spec)
            cells[(gname, cname)] = (key, config, cell.get("reference_auc"))
    activation_jobs = {}
    for name, overrides in ACTIVATION_MODELS.items():
        config = resolve_config(base_config, overrides)
        key = _job_key(config, activation_spec)
        jobs[key] = (config, activation_spec)
        activation_jobs[name] = (key, config)
    trained = train_jobs(jobs, train_batch, val_batch, workers)

    written = []
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    hashes = {}

    def checkpoint(label, key):
        # One file per label keeps the output layout independent of job sharing.
        path = os.path.join(ckpt_dir, f"{label}.ckpt")
        hashes[key] = (save_checkpoint(trained[key][0], path), os.path.relpath(path, out_dir))
        written.append(hashes[key][1])
        return hashes[key]

    common = {"sample_seed": sample_seed, **meta}

    for gname, group in matrix["groups"].items():
        gdir = os.path.join(out_dir, gname)
        os.makedirs(gdir, exist_ok=True)
        rows = []
        for cname in group:
            key, config, ref = cells[(gname, cname)]
            model, records = trained[key]
            digest, ckpt_path = checkpoint(f"{gname}_{cname}", key)
            cell_meta = {**common, "group": gname, "seed": config.seed, "checkpoint": ckpt_path,
                         "checkpoint_sha256": digest, "model_config": config.to_dict(),
                         "train_spec": train_spec.to_dict()}
            report = build_report(cname, model, test_batch, spec, meta=cell_meta)
            path = os.path.join(gdir, f"{cname}.tsv")
            write_report(path, report)
            written.append(os.path.relpath(path, out_dir))
            va_loss, va_auc, _ = evaluate(model, val_batch)
            te_loss, te_auc, _ = evaluate(model, test_batch)
            best = best_record(records)
            summary = report.summary_row()
            rows.append({
                "config": cname, "val_logloss": va_loss, "val_auc": va_auc,
                "test_logloss": te_loss, "test_auc": te_auc,
                "weak_fraction": summary["weak_fraction"], "mean_sigma_prime": summary["mean_sigma_prime"],
                "parameter_count": model.parameter_count(), "best_epoch": best.epoch if best else 0,
                "reference_auc": ref,
            })
        names = [r["config"] for r in rows]
        for r, k in zip(rows, _rank_desc([r["test_auc"] for r in rows], names)):
            r["rank"] = k
        with_ref = [i for i, r in enumerate(rows) if r["reference_auc"] is not None]
        ref_ranks = _rank_desc([rows[i]["reference_auc"] for i in with_ref], [names[i] for i in with_ref])
        for r in rows:
            r["reference_rank"] = ""
        for i, k in zip(with_ref, ref_ranks):
            rows[i]["reference_rank"] = k
        rho = spearman([rows[i]["rank"] for i in with_ref], ref_ranks)
        path = os.path.join(gdir, "summary.tsv")
        write_matrix_summary(path, rows, {
            **common, "group": gname, "train_spec": train_spec.to_dict(),
            "ordering": " > ".join(sorted(names, key=lambda n: rows[names.index(n)]["rank"])),
            "reference_ordering": " > ".join(names[i] for i in sorted(with_ref, key=lambda i: rows[i]["reference_rank"])),
            "rank_correlation": rho,
            "note": "orderings are reported for comparison only",
        })
        written.append(os.path.relpath(path, out_dir))

    fdir = os.path.join(out_dir, "activations")
    os.makedirs(fdir, exist_ok=True)
    sub = test_batch.subset(sample_ids)
    reports = {}
    for name in ACTIVATION_MODELS:
        key, config = activation_jobs[name]
        digest, ckpt_path = checkpoint(f"activation_{name}", key)
        reports[name] = build_report(
            name, trained[key][0], test_batch, spec, sample_ids,
            meta={**common, "seed": config.seed, "checkpoint": ckpt_path, "checkpoint_sha256": digest,
                  "model_config": config.to_dict(), "train_spec": activation_spec.to_dict()},
        )
    # Each single tower's own logit (bias included) is its partial; the sum is the logit.
    singles = {t: predict(trained[activation_jobs[f"tower_{t}"][0]][0], sub) for t in TOWERS}
    reports[SUMMED_NAME] = report_from_logits(
        SUMMED_NAME, sub.labels, sum(singles.values()), sample_ids, spec,
        meta={**common, "composition": "sum of the separately trained single-tower logits",
              "checkpoint_sha256": [hashes[activation_jobs[f"tower_{t}"][0]][0] for t in TOWERS]},
        parts=singles, bias=0.0,
    )
    reports = {name: reports[name] for name in ACTIVATION_ORDER}
    for name, report in reports.items():
        path = os.path.join(fdir, f"dump_{name}.tsv")
        write_activation_dump(path, dump_from_report(report, sample_seed))
        written.append(os.path.relpath(path, out_dir))
    path = os.path.join(fdir, "weak_gradient_summary.tsv")
    write_summary(path, weak_gradient_summary(reports), {**common, "epsilon": epsilon,
                                                         "boundary_abs_z": spec.boundary,
                                                         "sample_count": sample_count})
    written.append(os.path.relpath(path, out_dir))

    # Gate ratios come from the fully trained base configuration.
    key = _job_key(base_config, train_spec)
    if key not in trained:
        trained.update(train_jobs({key: (base_config, train_spec)}, train_batch, val_batch, 1))
    digest, ckpt_path = checkpoint("base", key)
    towers, ratios = ssg_scaling_ratios(trained[key][0], test_batch)
    gdir = os.path.join(out_dir, "gate_ratio")
    os.makedirs(gdir, exist_ok=True)
    path = os.path.join(gdir, "scaling_ratio.tsv")
    write_scaling_ratio(path, towers, ratios, {
        **common, "selection": base_config.selection, "checkpoint": ckpt_path, "checkpoint_sha256": digest,
        "ratio": "mean |E_sg| / (|E_se| + 1e-8) over samples and embedding dims", "delta": 1e-8,
    })
    written.append(os.path.relpath(path, out_dir))
    return sorted(written)
