"""``phn`` command line: gen-data, train, eval, grid and diagnose.

Every command resolves a JSON run config (defaults < ``--config`` file <
``--set key=value`` overrides < dedicated flags), echoes it to
``<out>/config.json`` before doing any work and finishes with a
``manifest.json`` listing the files it wrote.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import sys
import traceback

from . import data as D
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    ParseError,
    PhnError,
)
from .experiments import load_matrix, run_diagnose
from .model import LinearConfig, ModelConfig, load_checkpoint, save_checkpoint
from .training import (
    GridCellError,
    TrainSpec,
    best_record,
    build_model,
    evaluate,
    format_float,
    grid_search,
    train,
    write_metrics,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"
ERROR_FILE = "error.json"
CHECKPOINT_FILE = "model.ckpt"
METRICS_FILE = "metrics.tsv"
SUMMARY_FILE = "summary.json"
VOCAB_FILE = "vocab.json"


def default_run_config():
    model = ModelConfig(vocab_sizes=(1,)).to_dict()
    del model["vocab_sizes"]
    return {
        "output_dir": "runs/default",
        "deterministic": False,
        "jobs": 1,
        "model_kind": "phn",
        "data": {
            "format": "synthetic",
            "path": None,
            "synthetic": D.spec_to_dict(D.SyntheticSpec()),
            "split": [0.8, 0.1, 0.1],
            "split_seed": 0,
            "min_frequency": 2,
        },
        "model": model,
        "train": TrainSpec().to_dict(),
        "grid": {"layer_counts": [1, 2, 3]},
        "diagnose": {"epsilon": 0.05, "sample_count": 200, "sample_seed": 0, "activation_epochs": 1, "matrix": None},
    }


class UsageError(PhnError):
    pass


class DataError(PhnError):
    def __init__(self, message, kind="data_error"):
        super().__init__(message)
        self.kind = kind


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def _merge(base, update, path=""):
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, assignment):
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    node, parts = cfg, key.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(raw)


def resolve_config(args):
    cfg = default_run_config()
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}", "config_not_found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
        loaded.pop("command", None)  # present in echoed configs
        _merge(cfg, loaded)
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    if args.out:
        cfg["output_dir"] = args.out
    if args.deterministic:
        cfg["deterministic"] = True
    if args.jobs is not None:
        cfg["jobs"] = args.jobs
    if getattr(args, "matrix", None):
        cfg["diagnose"]["matrix"] = args.matrix
    if cfg["deterministic"]:
        cfg["jobs"] = 1
    if not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
        raise ConfigError("jobs must be a positive integer")
    return cfg


# ---------------------------------------------------------------------------
# Data loading
# ---------------------------------------------------------------------------


class Splits:
    def __init__(self, train, val, test, vocab_sizes, vocab=None, info=None):
        self.train, self.val, self.test = train, val, test
        self.vocab_sizes = list(vocab_sizes)
        self.vocab = vocab
        self.info = info or {}


def _split_batch(batch, data_cfg):
    parts = D.split(batch, data_cfg["split"], data_cfg["split_seed"])
    if len(parts) != 3:
        raise ConfigError("data.split must list train, validation and test fractions")
    return parts


def load_data(cfg) -> Splits:
    dc = cfg["data"]
    fmt = dc["format"]
    if fmt == "synthetic":
        spec = D.SyntheticSpec(**dc["synthetic"])
        batch, _ = D.generate_synthetic(spec)
        return Splits(*_split_batch(batch, dc), spec.vocab_sizes, info={"format": fmt})
    path = dc["path"]
    if not path:
        raise ConfigError(f"data.path is required for format {fmt!r}")
    if not os.path.exists(path):
        raise DataError(f"data not found: {path}", "data_not_found")
    if fmt == "encoded":
        ds = D.read_encoded(path)
        return Splits(*_split_batch(ds.batch, dc), ds.vocab_sizes, info={"format": fmt, "path": path})
    if fmt not in D.SCHEMAS:
        raise ConfigError(f"data.format must be synthetic, encoded, criteo or avazu; got {fmt!r}")
    schema = D.SCHEMAS[fmt]
    records, _ = D.read_records(path, schema)
    if not records:
        raise DataError(f"{path} holds no records", "empty_data")
    # The vocabulary only sees training rows.
    ids = D.split_indices(len(records), dc["split"], dc["split_seed"])
    if len(ids) != 3:
        raise ConfigError("data.split must list train, validation and test fractions")
    vocab = D.build_vocab([records[i] for i in ids[0]], dc["min_frequency"], schema)
    encoded = [D.encode_batch([records[i] for i in ix], vocab) if len(ix) else None for ix in ids]
    return Splits(*encoded, vocab.sizes, vocab=vocab, info={"format": fmt, "path": path})


def _require_eval_splits(splits):
    for name in ("train", "val", "test"):
        if getattr(splits, name) is None or len(getattr(splits, name)) == 0:
            raise ConfigError(f"the {name} split is empty; adjust data.split")


def model_config(cfg, vocab_sizes):
    return ModelConfig.from_dict({**cfg["model"], "vocab_sizes": list(vocab_sizes)})


def _model_for(cfg, vocab_sizes):
    kind = cfg["model_kind"]
    if kind == "phn":
        return build_model("phn", model_config(cfg, vocab_sizes))
    if kind == "linear":
        return build_model("linear", LinearConfig(vocab_sizes, cfg["model"]["seed"]))
    raise ConfigError(f"model_kind must be phn or linear, got {kind!r}")


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


class RunDir:
    def __init__(self, path):
        self.path = path
        self.files = []

    def file(self, name):
        full = os.path.join(self.path, name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return full

    def write_json(self, name, obj):
        with open(self.file(name), "w", encoding="utf-8") as fh:
            json.dump(json_safe(obj), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")

    def write_manifest(self, command, status):
        entries = []
        for name in sorted(set(self.files)):
            full = os.path.join(self.path, name)
            if os.path.isfile(full):
                with open(full, "rb") as fh:
                    digest = hashlib.sha256(fh.read()).hexdigest()
                entries.append({"path": name, "bytes": os.path.getsize(full), "sha256": digest})
        with open(os.path.join(self.path, MANIFEST_FILE), "w", encoding="utf-8") as fh:
            json.dump({"command": command, "status": status, "files": entries}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def json_safe(obj):
    """Strict-JSON copy of ``obj``: non-finite floats become "nan", "inf" or "-inf"."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "nan" if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return str(obj)


def _metrics_dict(logloss, auc):
    return {"logloss": logloss, "auc": auc}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg, run: RunDir, args):
    spec = D.SyntheticSpec(**cfg["data"]["synthetic"])
    batch, probs = D.generate_synthetic(spec)
    paths = D.write_encoded(run.path, batch, spec.vocab_sizes, probs,
                            meta={"generator": "synthetic", "spec": D.spec_to_dict(spec)})
    for p in paths:
        run.file(os.path.relpath(p, run.path))
    print(json.dumps({"samples": len(batch), "positive_rate": float(batch.labels.mean()),
                      "output_dir": run.path}))


def cmd_train(cfg, run: RunDir, args):
    splits = load_data(cfg)
    _require_eval_splits(splits)
    model = _model_for(cfg, splits.vocab_sizes)
    spec = TrainSpec.from_dict(cfg["train"])

    def progress(rows):
        for r in rows:
            row = {"epoch": r.epoch, "split": r.split, "logloss": r.logloss, "auc": r.auc}
            print(json.dumps(json_safe(row)), file=sys.stderr)

    model, records = train(model, splits.train, splits.val, spec, progress=None if args.quiet else progress)
    write_metrics(run.file(METRICS_FILE), records)
    digest = save_checkpoint(model, run.file(CHECKPOINT_FILE), extra={"train_spec": spec.to_dict()})
    if splits.vocab is not None:
        with open(run.file(VOCAB_FILE), "w", encoding="utf-8") as fh:
            fh.write(splits.vocab.to_json() + "\n")
    te_loss, te_auc, _ = evaluate(model, splits.test)
    va_loss, va_auc, _ = evaluate(model, splits.val)
    best = best_record(records)
    summary = {
        "model_kind": model.kind,
        "parameter_count": int(sum(p.size for p in model.parameters())),
        "best_epoch": best.epoch if best else 0,
        "epochs_run": max((r.epoch for r in records), default=0),
        "val": _metrics_dict(va_loss, va_auc),
        "test": _metrics_dict(te_loss, te_auc),
        "checkpoint_sha256": digest,
        "split_sizes": [len(splits.train), len(splits.val), len(splits.test)],
    }
    run.write_json(SUMMARY_FILE, summary)
    print(json.dumps(json_safe({"test": summary["test"], "checkpoint": run.file(CHECKPOINT_FILE)})))


def _checkpoint_path(args):
    path = args.checkpoint
    if path is None and args.run:
        path = os.path.join(args.run, CHECKPOINT_FILE)
    if path is None:
        raise UsageError("eval needs --checkpoint or --run")
    if not os.path.isfile(path):
        raise DataError(f"checkpoint not found: {path}", "checkpoint_not_found")
    return path


def cmd_eval(cfg, run: RunDir, args):
    path = _checkpoint_path(args)
    model = load_checkpoint(path)
    splits = load_data(cfg)
    if list(model.config.vocab_sizes) != splits.vocab_sizes:
        raise ContractError(
            f"checkpoint vocab sizes {list(model.config.vocab_sizes)} do not match the data {splits.vocab_sizes}"
        )
    out = {}
    for name in ("val", "test"):
        batch = getattr(splits, name)
        if batch is not None and len(batch):
            loss, auc, _ = evaluate(model, batch)
            out[name] = _metrics_dict(loss, auc)
    with open(path, "rb") as fh:
        out["checkpoint_sha256"] = hashlib.sha256(fh.read()).hexdigest()
    run.write_json("eval.json", out)
    print(json.dumps(json_safe(out)))


def cmd_grid(cfg, run: RunDir, args):
    if args.layers:
        try:
            cfg["grid"]["layer_counts"] = [int(x) for x in args.layers.split(",") if x.strip()]
        except ValueError:
            raise UsageError(f"--layers expects comma-separated integers, got {args.layers!r}") from None
    counts = cfg["grid"]["layer_counts"]
    if not counts:
        raise ConfigError("grid.layer_counts must be non-empty")
    splits = load_data(cfg)
    _require_eval_splits(splits)
    rows = grid_search(model_config(cfg, splits.vocab_sizes), counts, splits.train, splits.val,
                       TrainSpec.from_dict(cfg["train"]), jobs=cfg["jobs"])
    columns = ("layers", "val_logloss", "val_auc", "best_epoch", "parameter_count")
    with open(run.file("grid.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for r in rows:
            fh.write("\t".join([str(r["layers"]), format_float(r["val_logloss"]), format_float(r["val_auc"]),
                                str(r["best_epoch"]), str(r["parameter_count"])]) + "\n")
            write_metrics(run.file(f"grid/metrics_L{r['layers']}.tsv"), r["records"])
    print(json.dumps(json_safe([{c: r[c] for c in columns} for r in rows])))


def cmd_diagnose(cfg, run: RunDir, args):
    dcfg = cfg["diagnose"]
    matrix = None
    if dcfg["matrix"]:
        if not os.path.isfile(dcfg["matrix"]):
            raise DataError(f"matrix file not found: {dcfg['matrix']}", "matrix_not_found")
        matrix = load_matrix(dcfg["matrix"])
    splits = load_data(cfg)
    _require_eval_splits(splits)
    files = run_diagnose(
        run.path, model_config(cfg, splits.vocab_sizes), TrainSpec.from_dict(cfg["train"]),
        splits.train, splits.val, splits.test, matrix=matrix, epsilon=dcfg["epsilon"],
        sample_count=dcfg["sample_count"], sample_seed=dcfg["sample_seed"],
        activation_epochs=dcfg["activation_epochs"], workers=cfg["jobs"],
        meta={"data_format": cfg["data"]["format"]},
    )
    for f in files:
        run.file(f)
    print(json.dumps({"files": len(files), "output_dir": run.path}))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "diagnose": cmd_diagnose,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config entry, e.g. train.epochs=3 (repeatable)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--deterministic", action="store_true", help="disable all parallelism")
    common.add_argument("--jobs", type=int, help="worker processes for grid/diagnose cells")
    common.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")

    parser = _Parser(prog="phn", description="PHN click-through-rate model experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train one model")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--run", help="training run directory (uses its config.json and model.ckpt)")
    p = sub.add_parser("grid", parents=[common], help="depth grid search")
    p.add_argument("--layers", help="comma-separated layer counts")
    p = sub.add_parser("diagnose", parents=[common], help="configuration matrices and diagnostics")
    p.add_argument("--matrix", help="JSON matrix file (default: built-in tables)")
    return parser


def _exit_code(exc):
    if isinstance(exc, GridCellError):
        return _exit_code(exc.cause)
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, (DataError, ParseError, ContractError, DimensionError, FileNotFoundError,
                        NotADirectoryError, IsADirectoryError, PermissionError)):
        return EXIT_DATA
    if isinstance(exc, (ValueError, TypeError)):
        return EXIT_USAGE
    return EXIT_DATA


def _error_record(exc, command):
    kind = getattr(exc, "kind", None) or type(exc).__name__
    record = {"error": kind, "message": str(exc), "exit_code": _exit_code(exc), "command": command}
    payload = getattr(exc, "payload", None)
    if payload is None and isinstance(exc, GridCellError):
        record["layers"] = exc.depth
        payload = getattr(exc.cause, "payload", None)
    if payload is not None:
        record["payload"] = payload
    line = getattr(exc, "line_number", None)
    if line is not None:
        record["line_number"] = line
    return record


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    command, run = None, None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        if command == "eval":
            if args.run and not args.config:
                args.config = os.path.join(args.run, CONFIG_FILE)
            if not args.out:
                # Never overwrite the files of the run being evaluated.
                args.out = os.path.join(os.path.dirname(_checkpoint_path(args)), "eval")
        cfg = resolve_config(args)
        run = RunDir(cfg["output_dir"])
        os.makedirs(run.path, exist_ok=True)
        run.write_json(CONFIG_FILE, {"command": command, **copy.deepcopy(cfg)})
        COMMANDS[command](cfg, run, args)
        run.write_manifest(command, "ok")
        return EXIT_OK
    except Exception as exc:  # every failure becomes an error record and an exit code
        record = _error_record(exc, command)
        if run is not None and os.path.isdir(run.path):
            try:
                with open(os.path.join(run.path, ERROR_FILE), "w", encoding="utf-8") as fh:
                    json.dump(json_safe(record), fh, indent=2, sort_keys=True, allow_nan=False)
                    fh.write("\n")
                run.files.append(ERROR_FILE)
                run.write_manifest(command, "error")
            except OSError:
                pass
        print(json.dumps(json_safe(record), sort_keys=True, allow_nan=False), file=sys.stderr)
        if os.environ.get("PHN_TRACEBACK"):
            traceback.print_exc()
        return record["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
