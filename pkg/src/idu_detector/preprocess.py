"""Feature encoding, train/test splitting and minority-class oversampling."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, UsageError
from .ingest import CATEGORICAL, NUMERIC

log = logging.getLogger(__name__)

ENCODER_MAGIC = "idu-encoder"
ENCODER_VERSION = 1
STD_FLOOR = 1e-8


def _parse_float(cell):
    try:
        v = float(cell)
    except (TypeError, ValueError):
        return math.nan
    return v if math.isfinite(v) else math.nan


@dataclass
class ColumnAction:
    name: str
    index: int
    action: str  # onehot | standardize | passthrough | drop
    vocab: tuple[str, ...] = ()
    mean: float = 0.0
    std: float = 1.0

    @property
    def width(self):
        if self.action == "onehot":
            return len(self.vocab)
        return 0 if self.action == "drop" else 1

    def output_names(self):
        if self.action == "onehot":
            return [f"{self.name}={v}" for v in self.vocab]
        return [] if self.action == "drop" else [self.name]

    def to_json(self):
        d = {"name": self.name, "index": self.index, "action": self.action}
        if self.action == "onehot":
            d["vocab"] = list(self.vocab)
        elif self.action == "standardize":
            d["mean"], d["std"] = self.mean, self.std
        return d


@dataclass
class EncoderSpec:
    columns: list[ColumnAction] = field(default_factory=list)
    fitted: bool = False

    @property
    def width(self):
        return sum(c.width for c in self.columns)

    def output_names(self):
        return [n for c in self.columns for n in c.output_names()]

    def to_text(self):
        lines = [f"{ENCODER_MAGIC} {ENCODER_VERSION}"]
        lines += [json.dumps(c.to_json(), sort_keys=True, ensure_ascii=False) for c in self.columns]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        if not lines or lines[0].split() != [ENCODER_MAGIC, str(ENCODER_VERSION)]:
            raise DataError(f"not an encoder spec (header {lines[:1]!r})")
        cols = []
        for line in lines[1:]:
            if not line.strip():
                continue
            d = json.loads(line)
            cols.append(ColumnAction(d["name"], d["index"], d["action"], tuple(d.get("vocab", ())),
                                     d.get("mean", 0.0), d.get("std", 1.0)))
        return cls(cols, fitted=True)

    def digest(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def fit_encoder(rows, schema):
    """Learn one-hot vocabularies and z-score statistics from training rows.

    ``rows`` are cell sequences aligned with ``schema.columns``.  Label and
    ignored columns produce no output.
    """
    rows = list(rows)
    if not rows:
        raise UsageError("fit_encoder needs at least one training row")
    spec = EncoderSpec()
    for i, col in enumerate(schema.columns):
        if col.kind == CATEGORICAL:
            vocab = tuple(sorted({r[i] for r in rows}))
            spec.columns.append(ColumnAction(col.name, i, "onehot", vocab=vocab))
        elif col.kind == NUMERIC:
            vals = np.array([_parse_float(r[i]) for r in rows], dtype=np.float64)
            finite = vals[~np.isnan(vals)]
            if finite.size == 0:
                log.warning("column %s has no finite values; dropping it", col.name)
                spec.columns.append(ColumnAction(col.name, i, "drop"))
                continue
            mean = float(finite.mean(dtype=np.float64))
            std = max(float(finite.std(dtype=np.float64)), STD_FLOOR)
            spec.columns.append(ColumnAction(col.name, i, "standardize", mean=mean, std=std))
    spec.fitted = True
    return spec


@dataclass
class EncodedDataset:
    X: np.ndarray
    Y: np.ndarray
    columns: list[str]
    classes: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        self.Y = np.asarray(self.Y, dtype=np.float32)
        if self.X.ndim != 2 or self.Y.ndim != 2 or len(self.X) != len(self.Y):
            raise DataError(f"inconsistent dataset shapes X{self.X.shape} Y{self.Y.shape}")
        if self.X.shape[1] != len(self.columns) or self.Y.shape[1] != len(self.classes):
            raise DataError("column or class names do not match matrix widths")

    def __len__(self):
        return len(self.X)

    @property
    def labels(self):
        return self.Y.argmax(axis=1) if len(self.Y) else np.zeros(0, dtype=np.int64)

    def class_counts(self):
        return np.bincount(self.labels, minlength=len(self.classes))

    def subset(self, idx, **extra):
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedDataset(self.X[idx], self.Y[idx], list(self.columns), list(self.classes),
                              {**self.provenance, **extra})

    def save(self, path):
        meta = json.dumps({"columns": self.columns, "classes": self.classes,
                           "provenance": self.provenance}, sort_keys=True)
        with open(path, "wb") as fh:
            np.savez(fh, X=self.X, Y=self.Y, meta=np.array(meta))

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            return cls(z["X"], z["Y"], meta["columns"], meta["classes"], meta["provenance"])


def one_hot(labels, classes):
    index = {c: i for i, c in enumerate(classes)}
    Y = np.zeros((len(labels), len(classes)), dtype=np.float32)
    for r, lab in enumerate(labels):
        try:
            Y[r, index[lab]] = 1.0
        except KeyError:
            raise DataError(f"label {lab!r} is not one of {list(classes)}") from None
    return Y


def transform(rows, spec, labels=None, classes=None, provenance=None):
    """Encode rows with a fitted spec; the spec is never modified."""
    if not spec.fitted:
        raise UsageError("transform called with an unfitted encoder spec")
    rows = list(rows)
    n = len(rows)
    blocks = []
    for col in spec.columns:
        if col.action == "onehot":
            pos = {v: j for j, v in enumerate(col.vocab)}
            block = np.zeros((n, len(col.vocab)), dtype=np.float32)
            for r, row in enumerate(rows):
                j = pos.get(row[col.index])
                if j is not None:
                    block[r, j] = 1.0
            blocks.append(block)
        elif col.action == "standardize":
            vals = np.array([_parse_float(row[col.index]) for row in rows], dtype=np.float64)
            z = (vals - col.mean) / col.std
            blocks.append(np.nan_to_num(z, nan=0.0).reshape(n, 1))
        elif col.action == "passthrough":
            vals = np.array([_parse_float(row[col.index]) for row in rows], dtype=np.float64)
            blocks.append(np.nan_to_num(vals, nan=0.0).reshape(n, 1))
    X = np.concatenate(blocks, axis=1) if blocks else np.zeros((n, 0))
    X = np.asarray(X, dtype=np.float32)
    if not np.all(np.isfinite(X)):
        raise DataError("encoded matrix contains non-finite values")
    classes = list(classes or [])
    Y = one_hot(labels, classes) if labels is not None else np.zeros((n, len(classes)), dtype=np.float32)
    prov = {"encoder_digest": spec.digest(), **(provenance or {})}
    return EncodedDataset(X, Y, spec.output_names(), classes, prov)


def split_indices(labels, ratio, stratified=True, seed=0):
    """Disjoint, exhaustive (train, test) index arrays, each sorted ascending."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    if not stratified:
        perm = rng.permutation(len(labels))
        k = int(math.floor(ratio * len(labels) + 0.5))
        return np.sort(perm[:k]), np.sort(perm[k:])
    train, test = [], []
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        perm = rng.permutation(idx)
        if len(idx) == 1:
            log.warning("class %r has a single sample; it goes to the training split", cls)
            train.append(perm)
            continue
        k = int(math.floor(ratio * len(idx) + 0.5))
        train.append(perm[:k])
        test.append(perm[k:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)  # noqa: E731
    return cat(train), cat(test)


def split(dataset, ratio=0.8, stratified=True, seed=0):
    tr, te = split_indices(dataset.labels, ratio, stratified, seed)
    info = {"split_ratio": ratio, "split_stratified": stratified, "split_seed": seed}
    return dataset.subset(tr, **info), dataset.subset(te, **info)


def resample_target(counts, floor_fraction):
    # round before ceil so 0.05 * 10000 does not become 501
    return int(math.ceil(round(floor_fraction * max(counts), 9)))


def resample(train, floor_fraction=0.05, seed=0):
    """Random oversampling with replacement up to ``floor_fraction`` of the majority.

    Originals keep their order; duplicated rows are appended class by class.
    """
    counts = train.class_counts()
    n_classes = len(train.classes)
    if not 0.0 < floor_fraction <= 1.0 / n_classes + 1e-12:
        raise ConfigError(f"floor_fraction must lie in (0, 1/{n_classes}], got {floor_fraction}")
    empty = [c for c, k in zip(train.classes, counts) if k == 0]
    if empty:
        raise DataError(f"cannot resample: no training samples for {empty}")
    target = resample_target(counts, floor_fraction)
    rng = np.random.default_rng(seed)
    labels = train.labels
    extra = []
    for c, k in enumerate(counts):
        if k < target:
            extra.append(rng.choice(np.flatnonzero(labels == c), size=target - k, replace=True))
    idx = np.concatenate([np.arange(len(train))] + extra)
    return train.subset(idx, resample_floor=floor_fraction, resample_seed=seed)
