"""Dataset schemas, streaming readers, and tag/role mapping tables."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError, DataError, RejectThresholdExceeded, UnknownTag

log = logging.getLogger(__name__)

CLASSES = ("Benign", "DoS", "Probe", "R2L", "U2R")
ROLES = ("NormalUser", "MaliciousUser", "Intruder", "PotentialIntruder", "Excluded")
INSIDER_LABELS = ("normal", "insider-malicious")

CATEGORICAL, NUMERIC, LABEL, IGNORED = "categorical", "numeric", "label", "ignored"

KDD_FEATURES = (
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes", "land",
    "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in", "num_compromised",
    "root_shell", "su_attempted", "num_root", "num_file_creations", "num_shells",
    "num_access_files", "num_outbound_cmds", "is_host_login", "is_guest_login", "count",
    "srv_count", "serror_rate", "srv_serror_rate", "rerror_rate", "srv_rerror_rate",
    "same_srv_rate", "diff_srv_rate", "srv_diff_host_rate", "dst_host_count",
    "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate", "dst_host_serror_rate",
    "dst_host_srv_serror_rate", "dst_host_rerror_rate", "dst_host_srv_rerror_rate",
)
KDD_CATEGORICAL = {"protocol_type", "service", "flag"}
CIC_IGNORED = {"Flow ID", "Source IP", "Destination IP", "Timestamp", "Source Port"}
CIC_MIN_COLUMNS = 70


@dataclass(frozen=True)
class Column:
    name: str
    kind: str


@dataclass(frozen=True)
class DatasetSchema:
    name: str
    columns: tuple[Column, ...]
    header: bool = False
    quoted: bool = False

    def __post_init__(self):
        labels = [c for c in self.columns if c.kind == LABEL]
        if len(labels) != 1:
            raise ConfigError(f"schema {self.name} must have exactly one label column, has {len(labels)}")

    @property
    def width(self):
        return len(self.columns)

    @property
    def label_index(self):
        return next(i for i, c in enumerate(self.columns) if c.kind == LABEL)

    @property
    def family(self):
        return "cic" if self.name == "CICIDS2017" else "kdd"

    def feature_columns(self):
        return [(i, c) for i, c in enumerate(self.columns) if c.kind in (CATEGORICAL, NUMERIC)]

    @classmethod
    def kdd99(cls):
        cols = [Column(n, CATEGORICAL if n in KDD_CATEGORICAL else NUMERIC) for n in KDD_FEATURES]
        return cls("KDD99", tuple(cols + [Column("label", LABEL)]))

    @classmethod
    def nslkdd(cls):
        cols = [Column(n, CATEGORICAL if n in KDD_CATEGORICAL else NUMERIC) for n in KDD_FEATURES]
        return cls("NSLKDD", tuple(cols + [Column("label", LABEL), Column("difficulty", IGNORED)]))

    @classmethod
    def cicids2017(cls, header):
        names = [h.strip() for h in header]
        if len(names) < CIC_MIN_COLUMNS:
            raise DataError(f"CICIDS2017 header has {len(names)} columns, expected at least {CIC_MIN_COLUMNS}")
        if "Label" not in names:
            raise DataError("CICIDS2017 header has no 'Label' column")
        cols = []
        for n in names:
            kind = LABEL if n == "Label" else IGNORED if n in CIC_IGNORED else NUMERIC
            cols.append(Column(n, kind))
        return cls("CICIDS2017", tuple(cols), header=True, quoted=True)


def schema_for(name, path=None):
    """Resolve a schema by CLI name; CICIDS2017 needs the file to read its header."""
    key = name.lower().replace("-", "").replace("_", "")
    if key == "kdd99":
        return DatasetSchema.kdd99()
    if key == "nslkdd":
        return DatasetSchema.nslkdd()
    if key == "cicids2017":
        if path is None:
            raise ConfigError("the CICIDS2017 schema is read from the file header; pass a path")
        with open(path, newline="", encoding="utf-8", errors="replace") as fh:
            header = next(csv.reader(fh), None)
        if header is None:
            raise DataError(f"{path}: empty file")
        return DatasetSchema.cicids2017(header)
    raise ConfigError(f"unknown schema {name!r}")


@dataclass(frozen=True)
class FlowRecord:
    values: tuple[str, ...]
    line: int

    def label(self, schema):
        return self.values[schema.label_index]


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str


def _check_cells(cells, schema):
    if len(cells) != schema.width:
        return f"expected {schema.width} cells, got {len(cells)}"
    for cell, col in zip(cells, schema.columns):
        if col.kind == LABEL and not cell:
            return "empty label"
        if col.kind == NUMERIC and schema.family == "kdd":
            try:
                float(cell)
            except ValueError:
                return f"non-numeric value {cell!r} in column {col.name}"
    return None


def iter_records(path, schema, rejects=None):
    """Yield valid records in file order; malformed rows go to ``rejects``."""
    with open(path, newline="", encoding="utf-8", errors="replace") as fh:
        if schema.quoted:
            rows = csv.reader(fh)
        else:
            rows = (line.rstrip("\r\n").split(",") for line in fh)
        for lineno, cells in enumerate(rows, start=1):
            if schema.header and lineno == 1:
                continue
            if not cells or (len(cells) == 1 and not cells[0].strip()):
                continue
            cells = [c.strip() for c in cells]
            reason = _check_cells(cells, schema)
            if reason is not None:
                if rejects is not None:
                    rejects.append(Reject(lineno, reason))
                continue
            yield FlowRecord(tuple(cells), lineno)


@dataclass
class LoadedDataset:
    schema: DatasetSchema
    records: list[FlowRecord]
    rejects: list[Reject] = field(default_factory=list)
    source: str = ""


def load_dataset(path, schema, max_reject_fraction=0.01):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    rejects: list[Reject] = []
    records = list(iter_records(path, schema, rejects))
    total = len(records) + len(rejects)
    if total and len(rejects) / total > max_reject_fraction:
        first = ", ".join(f"line {r.line}: {r.reason}" for r in rejects[:5])
        raise RejectThresholdExceeded(
            f"{path}: {len(rejects)} of {total} rows rejected "
            f"(limit {max_reject_fraction:.1%}); first: {first}", rejects)
    if rejects:
        log.warning("%s: rejected %d of %d rows", path, len(rejects), total)
    return LoadedDataset(schema, records, rejects, str(path))


def write_reject_report(rejects, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rejects:
            fh.write(json.dumps({"line": r.line, "reason": r.reason}) + "\n")


# -- mapping tables ---------------------------------------------------------------

_DASHES = str.maketrans({"–": "-", "—": "-", "‒": "-", "‐": "-",
                         "‑": "-", "−": "-", "�": "-"})


def normalize_tag(tag, family):
    tag = tag.strip()
    if family == "kdd":
        if tag.endswith("."):
            tag = tag[:-1]
        return tag.lower()
    return " ".join(tag.translate(_DASHES).split())


def parse_mapping(text, source="<mapping>"):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.rsplit("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def _shipped(name):
    return resources.files("idu_detector").joinpath("maps", name).read_text(encoding="utf-8")


def _read_file(path):
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read mapping file {path}: {exc}") from exc


class LabelMap:
    def __init__(self, pairs, family):
        self.family = family
        self.entries: dict[str, str] = {}
        for tag, cls in pairs:
            if cls not in CLASSES:
                raise ConfigError(f"tag {tag!r} maps to unknown class {cls!r}")
            key = normalize_tag(tag, family)
            prev = self.entries.get(key)
            if prev is not None and prev != cls:
                raise ConfigError(f"tag {tag!r} maps to both {prev} and {cls}")
            self.entries[key] = cls

    def __call__(self, tag):
        return map_label(tag, self)

    def __len__(self):
        return len(self.entries)

    @classmethod
    def default(cls, schema_name):
        fname = {"KDD99": "kdd99.map", "NSLKDD": "nslkdd.map", "CICIDS2017": "cicids2017.map"}[schema_name]
        return cls(parse_mapping(_shipped(fname), fname), "cic" if schema_name == "CICIDS2017" else "kdd")

    @classmethod
    def from_file(cls, path, family):
        return cls(parse_mapping(_read_file(path), str(path)), family)

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in sorted(self.entries.items()))


def map_label(tag, label_map):
    key = normalize_tag(tag, label_map.family)
    try:
        return label_map.entries[key]
    except KeyError:
        raise UnknownTag(tag) from None


class RoleMap:
    def __init__(self, pairs):
        self.entries: dict[str, str] = {}
        for key, role in pairs:
            if role not in ROLES:
                raise ConfigError(f"{key!r} maps to unknown role {role!r}")
            if key not in CLASSES and key not in INSIDER_LABELS:
                raise ConfigError(f"{key!r} is neither a class nor an insider label")
            self.entries[key] = role

    def __call__(self, key):
        return map_role(key, self)

    @classmethod
    def default(cls):
        return cls(parse_mapping(_shipped("roles.map"), "roles.map"))

    @classmethod
    def from_file(cls, path):
        """Defaults overlaid with the file's entries."""
        base = cls.default()
        base.entries.update(cls(parse_mapping(_read_file(path), str(path))).entries)
        return base

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in sorted(self.entries.items()))

    def active_roles(self):
        """Roles reachable under this map, in canonical order, without Excluded."""
        used = set(self.entries.values())
        return [r for r in ROLES if r in used and r != "Excluded"]


def map_role(key, role_map):
    try:
        return role_map.entries[key]
    except KeyError:
        raise UnknownTag(key) from None
