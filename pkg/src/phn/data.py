"""Criteo/Avazu parsing, vocabularies, encoding, synthetic data and splits."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, EmptyBatchError, ParseError

MISSING = ""
OOV_INDEX = 0


@dataclass(frozen=True)
class Schema:
    name: str
    field_count: int
    integer_field_count: int
    categorical_field_count: int
    delimiter: str
    has_header: bool
    label_column: int
    column_names: tuple = ()

    def __post_init__(self):
        if self.field_count != self.integer_field_count + self.categorical_field_count:
            raise ConfigError(
                f"schema {self.name}: field_count {self.field_count} != "
                f"{self.integer_field_count} integer + {self.categorical_field_count} categorical"
            )
        if not 0 <= self.label_column <= self.field_count:
            raise ConfigError(f"schema {self.name}: label column {self.label_column} out of range")

    @property
    def column_count(self):
        return self.field_count + 1


CRITEO = Schema(
    name="criteo",
    field_count=39,
    integer_field_count=13,
    categorical_field_count=26,
    delimiter="\t",
    has_header=False,
    label_column=0,
    column_names=("label",) + tuple(f"I{i}" for i in range(1, 14)) + tuple(f"C{i}" for i in range(1, 27)),
)

# Every header column other than "click" is a field, including "id".
AVAZU = Schema(
    name="avazu",
    field_count=23,
    integer_field_count=0,
    categorical_field_count=23,
    delimiter=",",
    has_header=True,
    label_column=1,
    column_names=(
        "id", "click", "hour", "C1", "banner_pos", "site_id", "site_domain", "site_category",
        "app_id", "app_domain", "app_category", "device_id", "device_ip", "device_model",
        "device_type", "device_conn_type", "C14", "C15", "C16", "C17", "C18", "C19", "C20", "C21",
    ),
)

SCHEMAS = {"criteo": CRITEO, "avazu": AVAZU}


@dataclass(frozen=True)
class RawRecord:
    label: int
    tokens: tuple

    def integer_tokens(self, schema: Schema):
        return self.tokens[: schema.integer_field_count]

    def categorical_tokens(self, schema: Schema):
        return self.tokens[schema.integer_field_count:]


def parse_line(line: str, schema: Schema, line_number: int | None = None) -> RawRecord:
    line = line.rstrip("\r\n")
    columns = line.split(schema.delimiter)
    if len(columns) != schema.column_count:
        raise ParseError(
            f"expected {schema.column_count} {schema.name} columns, found {len(columns)}", line_number
        )
    label = columns.pop(schema.label_column)
    if label not in ("0", "1"):
        raise ParseError(f"label must be 0 or 1, found {label!r}", line_number)
    return RawRecord(int(label), tuple(columns))


def serialize_record(record: RawRecord, schema: Schema) -> str:
    columns = list(record.tokens)
    columns.insert(schema.label_column, str(record.label))
    return schema.delimiter.join(columns)


def read_records(path, schema: Schema):
    """Parse a whole file. Returns ``(records, header)``; header is None when the format has none."""
    records = []
    header = None
    with open(path, encoding="utf-8", newline="") as fh:
        for number, line in enumerate(fh, start=1):
            if number == 1 and schema.has_header:
                header = line.rstrip("\r\n")
                names = tuple(header.split(schema.delimiter))
                if len(names) != schema.column_count:
                    raise ParseError(
                        f"header has {len(names)} columns, expected {schema.column_count}", number
                    )
                if schema.column_names and names[schema.label_column] != schema.column_names[schema.label_column]:
                    raise ParseError(
                        f"label column {schema.label_column} is {names[schema.label_column]!r}, "
                        f"expected {schema.column_names[schema.label_column]!r}",
                        number,
                    )
                continue
            if not line.strip("\r\n"):
                continue
            records.append(parse_line(line, schema, number))
    return records, header


def write_records(path, records: Iterable[RawRecord], schema: Schema, header: str | None = None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if schema.has_header:
            fh.write((header or schema.delimiter.join(schema.column_names)) + "\n")
        for r in records:
            fh.write(serialize_record(r, schema) + "\n")


def bucketize_integer(token: str) -> str:
    """Discretize an integer-valued token: values above 2 map to floor(ln(v)^2)."""
    if token == MISSING:
        return MISSING
    try:
        v = int(token)
    except ValueError:
        return token
    if v > 2:
        return f"log2:{int(math.floor(math.log(v) ** 2))}"
    return str(v)


@dataclass
class FeatureVocab:
    """Per-field token maps. Index 0 is shared by out-of-vocabulary and missing tokens."""

    maps: list
    min_frequency: int
    integer_field_count: int = 0

    @property
    def field_count(self):
        return len(self.maps)

    @property
    def sizes(self):
        return [len(m) + 1 for m in self.maps]

    def normalize(self, field_index: int, token: str) -> str:
        if field_index < self.integer_field_count:
            return bucketize_integer(token)
        return token

    def index(self, field_index: int, token: str) -> int:
        token = self.normalize(field_index, token)
        if token == MISSING:
            return OOV_INDEX
        return self.maps[field_index].get(token, OOV_INDEX)

    def to_json(self):
        return json.dumps(
            {
                "min_frequency": self.min_frequency,
                "integer_field_count": self.integer_field_count,
                # insertion order == index order
                "tokens": [list(m) for m in self.maps],
            }
        )

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        maps = [{tok: i + 1 for i, tok in enumerate(tokens)} for tokens in raw["tokens"]]
        return cls(maps, raw["min_frequency"], raw["integer_field_count"])


def build_vocab(records: Sequence[RawRecord], min_frequency: int = 2, schema: Schema | None = None) -> FeatureVocab:
    if not records:
        raise EmptyBatchError("cannot build a vocabulary from zero records")
    field_count = len(records[0].tokens)
    integer_fields = schema.integer_field_count if schema is not None else 0
    vocab = FeatureVocab([{} for _ in range(field_count)], min_frequency, integer_fields)
    counts = [Counter() for _ in range(field_count)]
    first_seen = [dict() for _ in range(field_count)]
    for r in records:
        if len(r.tokens) != field_count:
            raise ContractError(f"record has {len(r.tokens)} fields, expected {field_count}")
        for f, raw in enumerate(r.tokens):
            tok = vocab.normalize(f, raw)
            if tok == MISSING:
                continue
            counts[f][tok] += 1
            first_seen[f].setdefault(tok, len(first_seen[f]))
    for f in range(field_count):
        kept = [t for t in first_seen[f] if counts[f][t] >= min_frequency]
        vocab.maps[f] = {t: i + 1 for i, t in enumerate(kept)}
    return vocab


@dataclass
class EncodedBatch:
    indices: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.indices.ndim != 2:
            raise ContractError(f"indices must be (batch, fields), got shape {self.indices.shape}")
        if self.labels.shape != (self.indices.shape[0],):
            raise ContractError(
                f"labels shape {self.labels.shape} does not match batch size {self.indices.shape[0]}"
            )
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ContractError("labels must be binary")

    def __len__(self):
        return self.indices.shape[0]

    @property
    def field_count(self):
        return self.indices.shape[1]

    def subset(self, rows):
        return EncodedBatch(self.indices[rows], self.labels[rows])

    def check_vocab(self, sizes):
        if len(sizes) != self.field_count:
            raise ContractError(f"batch has {self.field_count} fields, vocabulary has {len(sizes)}")
        bad = (self.indices < 0) | (self.indices >= np.asarray(sizes)[None, :])
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise ContractError(
                f"index {self.indices[row, col]} at row {row} field {col} outside vocab size {sizes[col]}"
            )


def encode_batch(records: Sequence[RawRecord], vocab: FeatureVocab) -> EncodedBatch:
    if len(records) == 0:
        raise EmptyBatchError("cannot encode an empty batch")
    F = vocab.field_count
    indices = np.zeros((len(records), F), dtype=np.int64)
    labels = np.empty(len(records))
    for i, r in enumerate(records):
        if len(r.tokens) != F:
            raise ContractError(f"record {i} has {len(r.tokens)} fields, vocabulary expects {F}")
        indices[i] = [vocab.index(f, t) for f, t in enumerate(r.tokens)]
        labels[i] = r.label
    return EncodedBatch(indices, labels)


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale stand-in for the real datasets.

    Tokens per field are drawn uniformly from ``1..vocab_size_per_field``
    (index 0 stays reserved for OOV). The logit of each sample is
    ``offset + sum of per-token biases + sum over interacting field pairs of
    pairwise_weight_scale * <L[f, a], L[g, b]>`` where ``L`` holds rank-``rank``
    latent factors and ``interacting_pairs`` field pairs, drawn from the seed,
    carry an interaction.
    """

    field_count: int = 10
    vocab_size_per_field: int = 100
    sample_count: int = 50_000
    pairwise_weight_scale: float = 3.0
    bias_scale: float = 0.2
    seed: int = 0
    interacting_pairs: int = 3
    rank: int = 1
    offset: float = 0.0

    def __post_init__(self):
        for name in ("field_count", "vocab_size_per_field", "sample_count", "rank"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"SyntheticSpec.{name} must be positive")
        if self.pairwise_weight_scale < 0 or self.bias_scale < 0:
            raise ConfigError("SyntheticSpec scales must be non-negative")
        max_pairs = self.field_count * (self.field_count - 1) // 2
        if not 0 <= self.interacting_pairs <= max_pairs:
            raise ConfigError(f"SyntheticSpec.interacting_pairs must lie in [0, {max_pairs}]")

    @property
    def vocab_sizes(self):
        return [self.vocab_size_per_field + 1] * self.field_count


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def synthetic_logits(spec: SyntheticSpec, indices: np.ndarray) -> np.ndarray:
    """The planted score for arbitrary index rows under ``spec``."""
    rng = np.random.default_rng([spec.seed, 1])
    F, V = spec.field_count, spec.vocab_size_per_field
    biases = rng.normal(0.0, 1.0, size=(F, V + 1)) * spec.bias_scale
    latent = rng.normal(0.0, 1.0 / math.sqrt(spec.rank), size=(F, V + 1, spec.rank))
    pairs = [(f, g) for f in range(F) for g in range(f + 1, F)]
    active = np.zeros(len(pairs), dtype=bool)
    active[rng.choice(len(pairs), size=spec.interacting_pairs, replace=False)] = True
    rows = np.arange(F)
    score = np.full(indices.shape[0], spec.offset) + biases[rows, indices].sum(axis=1)
    if spec.pairwise_weight_scale > 0:
        vecs = latent[rows, indices]  # (n, F, rank)
        for (f, g), on in zip(pairs, active):
            if on:
                score += spec.pairwise_weight_scale * np.einsum("nr,nr->n", vecs[:, f], vecs[:, g])
    return score


def generate_synthetic(spec: SyntheticSpec):
    """Returns ``(EncodedBatch, true_probabilities)``; a pure function of ``spec``."""
    rng = np.random.default_rng([spec.seed, 0])
    indices = rng.integers(1, spec.vocab_size_per_field + 1, size=(spec.sample_count, spec.field_count))
    probs = _sigmoid(synthetic_logits(spec, indices))
    labels = (rng.random(spec.sample_count) < probs).astype(np.float64)
    return EncodedBatch(indices, labels), probs


def split_indices(n: int, fractions: Sequence[float], seed: int):
    fractions = [float(f) for f in fractions]
    if not fractions or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    raw = np.array(fractions) * n
    sizes = np.floor(raw + 1e-9).astype(int)
    remainder = n - sizes.sum()
    for i in np.argsort(-(raw - sizes), kind="stable")[:remainder]:
        sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(np.concatenate([[0], sizes]))
    return [order[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def split(batch: EncodedBatch, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    return [batch.subset(ix) for ix in split_indices(len(batch), fractions, seed)]


# ---------------------------------------------------------------------------
# Encoded dataset files
# ---------------------------------------------------------------------------

DATA_FILE = "data.tsv"
PROB_FILE = "probabilities.txt"
META_FILE = "dataset.json"


@dataclass
class EncodedDataset:
    batch: EncodedBatch
    vocab_sizes: list
    probabilities: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def write_encoded(directory, batch: EncodedBatch, vocab_sizes, probabilities=None, meta=None):
    """Write ``data.tsv`` (label then field indices), optional probabilities, and ``dataset.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / DATA_FILE, "w", encoding="utf-8") as fh:
        for label, row in zip(batch.labels, batch.indices):
            fh.write(str(int(label)) + "\t" + "\t".join(map(str, row.tolist())) + "\n")
    files = [DATA_FILE]
    if probabilities is not None:
        with open(directory / PROB_FILE, "w", encoding="utf-8") as fh:
            for p in probabilities:
                fh.write(repr(float(p)) + "\n")
        files.append(PROB_FILE)
    info = {
        "format": "encoded",
        "sample_count": len(batch),
        "field_count": batch.field_count,
        "vocab_sizes": [int(v) for v in vocab_sizes],
        "files": files,
    }
    info.update(meta or {})
    (directory / META_FILE).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return [directory / f for f in files + [META_FILE]]


def read_encoded(directory) -> EncodedDataset:
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise FileNotFoundError(f"no {META_FILE} in {directory}")
    meta = json.loads(meta_path.read_text())
    rows = []
    with open(directory / DATA_FILE, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != meta["field_count"] + 1:
                raise ParseError(f"expected {meta['field_count'] + 1} columns, found {len(parts)}", number)
            try:
                rows.append([int(p) for p in parts])
            except ValueError as exc:
                raise ParseError(str(exc), number) from exc
    arr = np.array(rows, dtype=np.int64).reshape(-1, meta["field_count"] + 1)
    batch = EncodedBatch(arr[:, 1:], arr[:, 0])
    batch.check_vocab(meta["vocab_sizes"])
    probs = None
    if (directory / PROB_FILE).exists():
        probs = np.loadtxt(directory / PROB_FILE, dtype=np.float64, ndmin=1)
    return EncodedDataset(batch, list(meta["vocab_sizes"]), probs, meta)


def spec_to_dict(spec: SyntheticSpec):
    return asdict(spec)
