"""Seeded synthetic user-behaviour logs and their fusion with labelled flows.

Normal users log on in office hours from a small set of known devices.
Each malicious user has a share of sessions carrying injected anomaly
events: an off-hours activity burst, mass file access, or an
exfiltration-scale upload, optionally with a new device or a location
change.  A session is labelled ``insider-malicious`` exactly when it holds
at least one injected event, so the two session labels are separable by
construction.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .ingest import CATEGORICAL, IGNORED, LABEL, NUMERIC, Column, DatasetSchema, RoleMap

log = logging.getLogger(__name__)

EVENT_KINDS = ("logon", "logoff", "file_access", "email", "device", "http")
SESSION_FEATURES = (
    "logon_hour", "off_hours_ratio", "event_count", "distinct_devices", "file_ops",
    "upload_bytes", "download_bytes", "email_count", "email_recipients", "http_count",
    "new_device", "geo_change",
)
DAY = 86_400
HOUR = 3_600
OFF_HOURS = (7, 19)  # events before 07:00 or from 19:00 count as off-hours
ANOMALIES = ("off_hours", "mass_file", "exfiltration")


@dataclass
class BehaviorRecord:
    user: str
    session: str
    kind: str
    timestamp: int
    attrs: dict = field(default_factory=dict)

    def to_line(self):
        bag = ";".join(f"{k}={self.attrs[k]}" for k in sorted(self.attrs))
        return f"{self.user},{self.session},{self.kind},{self.timestamp},{bag}"


@dataclass(frozen=True)
class SessionFeatures:
    user: str
    session: str
    values: tuple[float, ...]
    label: str


def _is_off_hours(ts):
    hour = (ts % DAY) / HOUR
    return hour < OFF_HOURS[0] or hour >= OFF_HOURS[1]


def _normal_session(rng, user, sid, day, profile):
    start = day * DAY + int(np.clip(rng.normal(profile["hour"], 0.5), 7.0, 10.5) * HOUR)
    length = int(rng.uniform(6.0, 8.0) * HOUR)
    device = profile["devices"][int(rng.integers(len(profile["devices"])))]
    events = []
    for _ in range(rng.poisson(8)):
        events.append(("file_access", {"device": device}))
    for _ in range(rng.poisson(5)):
        events.append(("email", {"recipients": int(rng.integers(1, 4))}))
    for _ in range(rng.poisson(15)):
        events.append(("http", {"download_bytes": int(rng.lognormal(11, 1)),
                                "upload_bytes": int(rng.lognormal(7, 1))}))
    for _ in range(rng.poisson(0.3)):
        events.append(("device", {"device": device}))
    times = np.sort(rng.integers(start + 60, start + length - 60, size=len(events)))
    out = [BehaviorRecord(user, sid, "logon", start, {"device": device})]
    out += [BehaviorRecord(user, sid, kind, int(t), attrs) for (kind, attrs), t in zip(events, times)]
    out.append(BehaviorRecord(user, sid, "logoff", start + length, {"device": device}))
    return out


def _inject(rng, records, patterns):
    """Add injected anomaly events to a normal session in place."""
    user, sid = records[0].user, records[0].session
    start, end = records[0].timestamp, records[-1].timestamp
    day = start - start % DAY
    extra = []
    if "off_hours" in patterns:
        # move the whole session into the small hours
        shift = day + int(rng.uniform(0.5, 3.5) * HOUR) - start
        for r in records:
            r.timestamp += shift
        records[0].attrs["injected"] = 1
        start, end = start + shift, end + shift
        for t in rng.integers(start + 60, end - 60, size=int(rng.integers(20, 41))):
            extra.append(BehaviorRecord(user, sid, "http", int(t),
                                        {"download_bytes": int(rng.lognormal(13, 1)), "upload_bytes": 0,
                                         "injected": 1}))
    if "mass_file" in patterns:
        for t in rng.integers(start + 60, end - 60, size=int(rng.integers(150, 301))):
            extra.append(BehaviorRecord(user, sid, "file_access", int(t), {"injected": 1}))
    if "exfiltration" in patterns:
        for t in rng.integers(start + 60, end - 60, size=int(rng.integers(1, 4))):
            extra.append(BehaviorRecord(user, sid, "http", int(t),
                                        {"upload_bytes": int(rng.uniform(5e7, 5e8)), "download_bytes": 0,
                                         "injected": 1}))
    if rng.random() < 0.5:
        extra.append(BehaviorRecord(user, sid, "device", int(rng.integers(start + 60, end - 60)),
                                    {"device": f"{user}-usb{int(rng.integers(100))}", "new_device": 1,
                                     "injected": 1}))
    if rng.random() < 0.3:
        records[0].attrs["geo_change"] = 1
        records[0].attrs["injected"] = 1
    body = sorted(records[1:-1] + extra, key=lambda r: r.timestamp)
    return [records[0]] + body + [records[-1]]


def malicious_quota(n_users, scenario_mix):
    normal, malicious = scenario_mix
    if min(normal, malicious) < 0 or not math.isclose(normal + malicious, 1.0, abs_tol=1e-9):
        raise ConfigError(f"scenario_mix fractions must be non-negative and sum to 1, got {scenario_mix}")
    return int(math.floor(n_users * malicious + 0.5))


def generate_users(n_users, scenario_mix=(0.9, 0.1), sessions_per_user=20, seed=0,
                   anomalous_share=0.5):
    """Per-user behaviour records, users in id order and time order within a user.

    Each user draws from its own generator spawned from ``seed`` so users
    can be produced independently and in any order.
    """
    n_mal = malicious_quota(n_users, scenario_mix)
    if sessions_per_user < 1:
        raise ConfigError("sessions_per_user must be at least 1")
    root = np.random.SeedSequence(seed)
    malicious = set(np.random.default_rng(root).permutation(n_users)[:n_mal].tolist())
    out = []
    for u in range(n_users):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(u,)))
        user = f"u{u:05d}"
        profile = {"hour": rng.uniform(7.5, 9.5),
                   "devices": [f"{user}-pc{i}" for i in range(int(rng.integers(1, 3)))]}
        bad = set()
        if u in malicious:
            k = max(1, int(math.floor(anomalous_share * sessions_per_user + 0.5)))
            bad = set(rng.choice(sessions_per_user, size=min(k, sessions_per_user), replace=False).tolist())
        for day in range(sessions_per_user):
            sid = f"{user}-s{day:04d}"
            recs = _normal_session(rng, user, sid, day, profile)
            if day in bad:
                n_pat = int(rng.integers(1, 4))
                patterns = set(rng.choice(ANOMALIES, size=n_pat, replace=False).tolist())
                recs = _inject(rng, recs, patterns)
            out.extend(recs)
    return out


def malicious_users(records):
    return sorted({r.user for r in records if r.attrs.get("injected")})


def _session_vector(events):
    logon = next((e for e in events if e.kind == "logon"), events[0])
    devices = {e.attrs["device"] for e in events if "device" in e.attrs}
    kinds = [e.kind for e in events]
    return (
        (logon.timestamp % DAY) / HOUR,
        sum(_is_off_hours(e.timestamp) for e in events) / len(events),
        float(len(events)),
        float(len(devices)),
        float(kinds.count("file_access")),
        float(sum(e.attrs.get("upload_bytes", 0) for e in events)),
        float(sum(e.attrs.get("download_bytes", 0) for e in events)),
        float(kinds.count("email")),
        float(sum(e.attrs.get("recipients", 0) for e in events)),
        float(kinds.count("http")),
        float(max(e.attrs.get("new_device", 0) for e in events)),
        float(max(e.attrs.get("geo_change", 0) for e in events)),
    )


def sessionize(records):
    """One feature vector per (user, session) run of consecutive records."""
    out = []
    current, key = [], None
    for r in list(records) + [None]:
        k = None if r is None else (r.user, r.session)
        if current and k != key:
            label = "insider-malicious" if any(e.attrs.get("injected") for e in current) else "normal"
            out.append(SessionFeatures(key[0], key[1], _session_vector(current), label))
            current = []
        if r is not None:
            current.append(r)
            key = k
    return out


# -- fusion with flow records --------------------------------------------------------


@dataclass
class JoinPolicy:
    insider_fraction: float = 0.05
    allow_recycle: bool = False
    role_map: RoleMap | None = None

    def roles(self):
        return self.role_map or RoleMap.default()


@dataclass(frozen=True)
class SynergisticRecord:
    flow: tuple[str, ...]
    session: tuple[float, ...]
    cls: str
    role: str
    insider_label: str

    @property
    def width(self):
        return len(self.flow) + len(self.session)


def join_quotas(flow_classes, policy):
    """Rows per stratum the join will emit: attack classes, then benign split by session label."""
    roles = policy.roles()
    counts = {}
    for c in flow_classes:
        if roles(c) != "Excluded":
            counts[c] = counts.get(c, 0) + 1
    benign = counts.pop("Benign", 0)
    n_insider = int(math.floor(policy.insider_fraction * benign + 0.5))
    quotas = {"Benign/normal": benign - n_insider, "Benign/insider-malicious": n_insider}
    quotas.update(sorted(counts.items()))
    return quotas


def _draw(rng, pool, k, stratum, allow_recycle):
    if k == 0:
        return []
    if not pool:
        raise ConfigError(f"stratum {stratum!r} is starved: need {k} sessions, have none")
    if k > len(pool):
        if not allow_recycle:
            raise ConfigError(f"stratum {stratum!r} is starved: need {k} sessions, have {len(pool)}")
        log.warning("stratum %s: recycling %d sessions to cover %d pairings", stratum, len(pool), k)
    picks = []
    while len(picks) < k:
        picks.extend(rng.permutation(len(pool))[:k - len(picks)].tolist())
    return [pool[i] for i in picks]


def join_synergistic(flows, sessions, policy=None, seed=0):
    """Pair each labelled flow with one behaviour session.

    ``flows`` is a sequence of ``(feature_cells, class)``.  Attack flows and
    most benign flows take a normal session; ``insider_fraction`` of benign
    flows take an insider-malicious session and become MaliciousUser.
    Flows whose class maps to the Excluded role are dropped.
    """
    policy = policy or JoinPolicy()
    flows, sessions = list(flows), list(sessions)
    if not flows or not sessions:
        raise DataError("join_synergistic needs non-empty flows and sessions")
    roles = policy.roles()
    rng = np.random.default_rng(seed)
    kept = [(cells, c) for cells, c in flows if roles(c) != "Excluded"]
    widths = {len(cells) for cells, _ in kept}
    if len(widths) > 1:
        raise DataError(f"flow blocks have inconsistent widths {sorted(widths)}")
    quotas = join_quotas([c for _, c in kept], policy)
    benign_idx = [i for i, (_, c) in enumerate(kept) if c == "Benign"]
    insider_flows = set(rng.permutation(benign_idx)[:quotas["Benign/insider-malicious"]].tolist()) \
        if benign_idx else set()
    normal_pool = [s for s in sessions if s.label == "normal"]
    insider_pool = [s for s in sessions if s.label == "insider-malicious"]
    n_normal = len(kept) - len(insider_flows)
    normal_draw = iter(_draw(rng, normal_pool, n_normal, "normal sessions", policy.allow_recycle))
    insider_draw = iter(_draw(rng, insider_pool, len(insider_flows), "insider-malicious sessions",
                              policy.allow_recycle))
    out = []
    for i, (cells, c) in enumerate(kept):
        if i in insider_flows:
            s = next(insider_draw)
            role = roles("insider-malicious")
        else:
            s = next(normal_draw)
            role = roles(c)
        out.append(SynergisticRecord(tuple(cells), s.values, c, role, s.label))
    return out


def synergistic_schema(flow_schema, label="role"):
    """Schema of the fused CSV: ``flow_*`` feature columns, ``ueba_*`` columns, class, role."""
    if label not in ("role", "class"):
        raise ConfigError(f"label column must be 'role' or 'class', got {label!r}")
    cols = [Column(f"flow_{c.name}", c.kind) for _, c in flow_schema.feature_columns()]
    cols += [Column(f"ueba_{n}", NUMERIC) for n in SESSION_FEATURES]
    cols += [Column("class", LABEL if label == "class" else IGNORED),
             Column("role", LABEL if label == "role" else IGNORED)]
    return DatasetSchema(f"{flow_schema.name}-UEBA", tuple(cols), header=True, quoted=True)


def synergistic_rows(records):
    """Cell tuples aligned with ``synergistic_schema``."""
    return [r.flow + tuple(repr(float(v)) for v in r.session) + (r.cls, r.role) for r in records]


def write_synergistic_csv(records, flow_schema, path):
    schema = synergistic_schema(flow_schema)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c.name for c in schema.columns])
        w.writerows(synergistic_rows(records))
    return schema


def flow_features(record, schema):
    """Feature cells of a flow record, dropping label and ignored columns."""
    return tuple(record.values[i] for i, _ in schema.feature_columns())


__all__ = [
    "BehaviorRecord", "SessionFeatures", "SynergisticRecord", "JoinPolicy", "generate_users", "sessionize",
    "join_synergistic", "join_quotas", "synergistic_schema", "synergistic_rows", "write_synergistic_csv",
    "flow_features", "malicious_users", "SESSION_FEATURES", "CATEGORICAL",
]
