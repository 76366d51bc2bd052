"""End-to-end stages: ingest, optional behaviour join, encode, resample, select, train, evaluate."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import forest, ingest, ueba
from .errors import ConfigError, DataError, IDUError
from .evaluate import evaluate_model
from .model import DEFAULT_WIDTHS, ModelConfig, init_params
from .preprocess import fit_encoder, resample, split_indices, transform
from .train import TrainConfig, train

log = logging.getLogger(__name__)

TASKS = ("class", "role")


@dataclass(frozen=True)
class RunConfig:
    schema: str = "nslkdd"
    task: str = "class"
    train_path: str = ""
    test_path: str = ""
    map_file: str = ""
    role_map_file: str = ""
    max_reject_fraction: float = 0.01
    split_ratio: float = 0.8
    stratified: bool = True
    resample_floor: float = 0.05  # 0 turns oversampling off
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 5
    k: int = 32
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    dk: int = 16
    group: int = 1
    dropout: float = 0.2
    epochs: int = 30
    batch: int = 256
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0
    deterministic: bool = True
    runs: int = 10
    fractions: tuple[float, ...] = (0.10, 0.25, 0.50, 0.75, 1.00)
    n_users: int = 400
    sessions_per_user: int = 60
    malicious_fraction: float = 0.1
    anomalous_share: float = 0.5
    insider_fraction: float = 0.05
    allow_recycle: bool = False
    out: str = "out"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")

    def to_dict(self):
        d = asdict(self)
        d["widths"], d["fractions"] = list(self.widths), list(self.fractions)
        return d

    def digest(self):
        """SHA-256 over every setting except the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed):
        return replace(self, seed=seed)

    def model_config(self, d0, n_classes):
        return ModelConfig(d0=d0, n_classes=n_classes, widths=self.widths, d_k=self.dk, g=self.group,
                           dropout=self.dropout, seed=self.seed)

    def train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch, lr=self.lr, clip_norm=self.clip_norm,
                           seed=self.seed, deterministic=self.deterministic)


# command-line flag spelling -> RunConfig field
FLAG_FIELDS = {
    "schema": "schema", "task": "task", "train": "train_path", "test": "test_path", "map_file": "map_file",
    "role_map_file": "role_map_file", "split": "split_ratio", "resample_floor": "resample_floor",
    "trees": "n_trees", "max_depth": "max_depth", "min_leaf": "min_leaf", "k": "k", "widths": "widths",
    "dk": "dk", "group": "group", "dropout": "dropout", "epochs": "epochs", "batch": "batch", "lr": "lr",
    "clip": "clip_norm", "seed": "seed", "deterministic": "deterministic", "runs": "runs",
    "fractions": "fractions", "n_users": "n_users", "sessions_per_user": "sessions_per_user",
    "malicious_fraction": "malicious_fraction", "insider_fraction": "insider_fraction",
    "allow_recycle": "allow_recycle", "out": "out",
}


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(name, text):
    """Parse a text value for RunConfig field ``name`` using the default's type."""
    defaults = {f.name: f.default for f in fields(RunConfig)}
    if name not in defaults:
        raise ConfigError(f"unknown config key {name!r}")
    default = defaults[name]
    text = str(text).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(x) for x in text.replace(" ", "").split(",") if x)
        return type(default)(text)
    except ValueError:
        raise ConfigError(f"cannot parse {name}={text!r}") from None


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` comments; keys use flag spelling or field names."""
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    out = {}
    for key, value in ingest.parse_mapping(text, str(path)):
        key = key.lstrip("-").replace("-", "_")
        key = FLAG_FIELDS.get(key, key)
        out[key] = coerce(key, value)
    return out


def resolve(overrides=None, config_file=None):
    """Defaults, then the config file, then explicit overrides."""
    values = {}
    if config_file:
        values.update(read_config_file(config_file))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)


@contextlib.contextmanager
def stage(name):
    """Tag package errors raised inside with the pipeline stage they came from."""
    try:
        yield
    except IDUError as e:
        if not hasattr(e, "stage"):
            e.stage = name
        raise


# -- dataset assembly ----------------------------------------------------------------


@dataclass
class BuiltData:
    train: object
    test: object
    encoder: object
    classes: list[str]
    encode_schema: object
    flow_schema: object
    joined: list | None = None
    rejects: list | None = None


def _label_map(cfg, schema):
    if cfg.map_file:
        return ingest.LabelMap.from_file(cfg.map_file, schema.family)
    return ingest.LabelMap.default(schema.name)


def role_map(cfg):
    return ingest.RoleMap.from_file(cfg.role_map_file) if cfg.role_map_file else ingest.RoleMap.default()


def _load(cfg, path, schema, labels):
    loaded = ingest.load_dataset(path, schema, cfg.max_reject_fraction)
    if not loaded.records:
        raise DataError(f"{path}: no valid records")
    return loaded, [labels(r.label(schema)) for r in loaded.records]


def build_dataset(cfg):
    """Load, label, split, encode and resample according to ``cfg``."""
    with stage("ingest"):
        if not cfg.train_path:
            raise ConfigError("no training data path given")
        schema = ingest.schema_for(cfg.schema, cfg.train_path)
        labels = _label_map(cfg, schema)
        loaded, classes_of = _load(cfg, cfg.train_path, schema, labels)
        records = list(loaded.records)
        rejects = list(loaded.rejects)
        n_train_file = len(records)
        if cfg.test_path:
            test_loaded, test_classes = _load(cfg, cfg.test_path, schema, labels)
            records += test_loaded.records
            classes_of += test_classes
            rejects += test_loaded.rejects

    joined = None
    if cfg.task == "class":
        rows = [r.values for r in records]
        targets = classes_of
        encode_schema = schema
        classes = [c for c in ingest.CLASSES if c in set(targets)]
        origin = np.arange(len(rows)) < n_train_file
    else:
        with stage("ueba-synth"):
            roles = role_map(cfg)
            keep = [i for i, c in enumerate(classes_of) if roles(c) != "Excluded"]
            if not keep:
                raise DataError("every flow maps to an excluded role")
            flows = [(ueba.flow_features(records[i], schema), classes_of[i]) for i in keep]
            mix = (1.0 - cfg.malicious_fraction, cfg.malicious_fraction)
            behaviour = ueba.generate_users(cfg.n_users, mix, cfg.sessions_per_user, cfg.seed,
                                            cfg.anomalous_share)
            policy = ueba.JoinPolicy(cfg.insider_fraction, cfg.allow_recycle, roles)
            joined = ueba.join_synergistic(flows, ueba.sessionize(behaviour), policy, cfg.seed)
            rows = ueba.synergistic_rows(joined)
            targets = [r.role for r in joined]
            encode_schema = ueba.synergistic_schema(schema, "role")
            classes = [r for r in roles.active_roles() if r in set(targets)]
            origin = np.array(keep) < n_train_file

    with stage("preprocess"):
        if len(classes) < 2:
            raise DataError(f"need at least two {cfg.task} labels in the data, found {classes}")
        index = {c: i for i, c in enumerate(classes)}
        y = np.array([index[t] for t in targets])
        if cfg.test_path:
            tr, te = np.flatnonzero(origin), np.flatnonzero(~origin)
        else:
            tr, te = split_indices(y, cfg.split_ratio, cfg.stratified, cfg.seed)
        spec = fit_encoder([rows[i] for i in tr], encode_schema)
        prov = {"config_digest": cfg.digest(), "task": cfg.task, "schema": schema.name,
                "source": cfg.train_path, "seed": cfg.seed}
        train_ds = transform([rows[i] for i in tr], spec, [targets[i] for i in tr], classes, prov)
        test_ds = transform([rows[i] for i in te], spec, [targets[i] for i in te], classes, prov)
        if cfg.resample_floor > 0:
            train_ds = resample(train_ds, cfg.resample_floor, cfg.seed)
    return BuiltData(train_ds, test_ds, spec, classes, encode_schema, schema, joined, rejects)


def select_features(train_ds, cfg):
    with stage("feature-select"):
        model = forest.fit_forest(train_ds.X, train_ds.labels, cfg.n_trees, cfg.max_depth, cfg.min_leaf,
                                  seed=cfg.seed, n_classes=len(train_ds.classes))
        return forest.build_manifest(model, train_ds.columns, cfg.k, config_digest=cfg.digest(),
                                     n_trees=cfg.n_trees, seed=cfg.seed)


def apply_manifest(ds, manifest):
    manifest.check_columns(ds.columns)
    out = forest.project(ds, manifest.indices)
    out.provenance["manifest_digest"] = manifest.digest()
    return out


def fit_model(train_ds, cfg):
    """Train on an already projected dataset; returns ``(params, model_cfg, history, seconds)``."""
    with stage("train"):
        mcfg = cfg.model_config(train_ds.X.shape[1], len(train_ds.classes))
        start = time.perf_counter()
        params, history = train(init_params(mcfg), mcfg, train_ds.X, train_ds.Y, cfg.train_config())
        return params, mcfg, history, time.perf_counter() - start


def run_cycle(cfg):
    """One full build, select, train and evaluate pass; returns the report."""
    data = build_dataset(cfg)
    manifest = select_features(data.train, cfg)
    train_ds = apply_manifest(data.train, manifest)
    test_ds = apply_manifest(data.test, manifest)
    params, mcfg, _, seconds = fit_model(train_ds, cfg)
    with stage("evaluate"):
        report, _ = evaluate_model(params, mcfg, test_ds, expected_manifest=manifest.digest(),
                                   train_seconds=seconds, seed=cfg.seed, config_digest=cfg.digest())
    return report
