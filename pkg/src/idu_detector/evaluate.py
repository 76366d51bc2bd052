"""Confusion-matrix metrics, repeated-run stability and data-size scaling."""

from __future__ import annotations

import csv
import json
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import psutil

from .errors import ConfigError, DataError, DigestMismatch, IDUError, exit_code_for
from .model import predict_proba

log = logging.getLogger(__name__)

REPORT_SCHEMA = "idu-eval-report 1"
STABILITY_SCHEMA = "idu-stability 1"
SCALING_SCHEMA = "idu-scaling 1"
QUARTILE_METHOD = "linear"  # numpy's default percentile interpolation
RATE_KEYS = ("accuracy", "precision", "recall", "dr", "far", "fnr", "tnr", "f1")


def confusion_matrix(y_true, y_pred, n_classes):
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError("truth and prediction vectors differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def class_metrics(cm, k):
    """One-vs-rest counts and rates for class ``k``; 0/0 yields 0 and a flag."""
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    tp = int(cm[k, k])
    fn = int(cm[k].sum()) - tp
    fp = int(cm[:, k].sum()) - tp
    tn = total - tp - fn - fp
    flags = []
    precision = _ratio(tp, tp + fp, "precision", flags)
    recall = _ratio(tp, tp + fn, "recall", flags)
    tnr = _ratio(tn, tn + fp, "far", flags)
    # complements keep recall + fnr and far + tnr exactly 1
    fnr = 1.0 - recall if tp + fn else 0.0
    far = 1.0 - tnr if tn + fp else 0.0
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn, "precision": precision, "recall": recall, "dr": recall,
            "far": far, "fnr": fnr, "tnr": tnr, "accuracy": _ratio(tp + tn, total, "accuracy", flags),
            "f1": f1, "zero_division": flags}


def metrics(cm, classes):
    cm = np.asarray(cm, dtype=np.int64)
    if cm.sum() <= 0:
        raise DataError("cannot compute metrics on an empty confusion matrix")
    per = {c: class_metrics(cm, k) for k, c in enumerate(classes)}
    macro = {m: float(np.mean([per[c][m] for c in classes])) for m in RATE_KEYS}
    tp = sum(per[c]["tp"] for c in classes)
    fp = sum(per[c]["fp"] for c in classes)
    fn = sum(per[c]["fn"] for c in classes)
    flags = []
    micro_p = _ratio(tp, tp + fp, "precision", flags)
    micro_r = _ratio(tp, tp + fn, "recall", flags)
    micro = {"accuracy": int(np.trace(cm)) / int(cm.sum()), "precision": micro_p, "recall": micro_r,
             "f1": _ratio(2 * micro_p * micro_r, micro_p + micro_r, "f1", flags)}
    return per, macro, micro


@dataclass
class EvalReport:
    classes: list[str]
    confusion: list[list[int]]
    per_class: dict
    macro: dict
    micro: dict
    train_seconds: float | None = None
    latency_per_record: float | None = None
    mean_batch_seconds: float | None = None
    detection_seconds: float | None = None
    seed: int | None = None
    config_digest: str | None = None
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes, **extra):
        cm = confusion_matrix(y_true, y_pred, len(classes))
        per, macro, micro = metrics(cm, classes)
        return cls(list(classes), cm.tolist(), per, macro, micro, **extra)

    def to_dict(self):
        return {"schema": REPORT_SCHEMA, **asdict(self)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.pop("schema", None) != REPORT_SCHEMA:
            raise DataError("not an evaluation report")
        return cls(**d)


def evaluate_model(params, cfg, test, classes=None, expected_manifest=None, batch_size=1024, **extra):
    """Score ``test`` with argmax of the softmax; returns ``(report, predictions)``.

    ``expected_manifest`` is the feature-manifest digest stored with the
    model; the test set must carry the same one in its provenance.
    """
    if expected_manifest is not None:
        have = test.provenance.get("manifest_digest")
        if have != expected_manifest:
            raise DigestMismatch(f"test set feature manifest {have} does not match the model's {expected_manifest}")
    classes = list(classes or test.classes)
    if len(test) == 0:
        raise DataError("test set is empty")
    batches = []
    start = time.perf_counter()
    preds = []
    for i in range(0, len(test), batch_size):
        t0 = time.perf_counter()
        preds.append(predict_proba(params, cfg, test.X[i:i + batch_size], batch_size).argmax(axis=1))
        batches.append(time.perf_counter() - t0)
    detection = time.perf_counter() - start
    pred = np.concatenate(preds)
    report = EvalReport.from_predictions(test.labels, pred, classes, latency_per_record=detection / len(test),
                                         mean_batch_seconds=float(np.mean(batches)), detection_seconds=detection,
                                         provenance=dict(test.provenance), **extra)
    return report, pred


# -- stability ---------------------------------------------------------------------


def box_stats(values):
    """Box-plot summary: linear-interpolation quartiles and 1.5 IQR whiskers."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DataError("box_stats needs at least one value")
    q1, median, q3 = (float(x) for x in np.percentile(v, [25, 50, 75]))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {"n": int(v.size), "mean": float(v.mean()), "median": median, "q1": q1, "q3": q3, "iqr": iqr,
            "std": float(v.std(ddof=1)) if v.size > 1 else 0.0, "min": float(v.min()), "max": float(v.max()),
            "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
            "fence_low": lo_fence, "fence_high": hi_fence,
            "outliers": [float(x) for x in v if x < lo_fence or x > hi_fence]}


STABILITY_METRICS = {
    "macro_accuracy": lambda r: r.macro["accuracy"],
    "micro_accuracy": lambda r: r.micro["accuracy"],
    "macro_precision": lambda r: r.macro["precision"],
    "macro_recall": lambda r: r.macro["recall"],
    "macro_f1": lambda r: r.macro["f1"],
    "macro_far": lambda r: r.macro["far"],
}


@dataclass
class StabilitySummary:
    runs: list[dict]
    stats: dict
    quartile_method: str = QUARTILE_METHOD
    std_ddof: int = 1

    @property
    def failed(self):
        return [r["seed"] for r in self.runs if r["status"] != "ok"]

    @classmethod
    def from_runs(cls, runs):
        """Statistics over the completed runs; ``runs`` hold seed, status and report dicts."""
        done = [EvalReport.from_dict(r["report"]) for r in runs if r["status"] == "ok"]
        stats = {m: box_stats([f(rep) for rep in done]) for m, f in STABILITY_METRICS.items()} if done else {}
        return cls(list(runs), stats)

    def to_json(self):
        return json.dumps({"schema": STABILITY_SCHEMA, **asdict(self)}, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        if d.pop("schema", None) != STABILITY_SCHEMA:
            raise DataError("not a stability summary")
        return cls(**d)


def stability_run(run_fn, runs=10, base_seed=0):
    """Call ``run_fn(seed) -> EvalReport`` for seeds base_seed .. base_seed+runs-1.

    A run that raises a package error is recorded as failed and skipped in
    the statistics.
    """
    if runs < 2:
        raise ConfigError(f"stability needs at least two runs, got {runs}")
    out = []
    for seed in range(base_seed, base_seed + runs):
        try:
            report = run_fn(seed)
            out.append({"seed": seed, "status": "ok", "report": report.to_dict()})
        except IDUError as e:
            log.error("stability run with seed %d failed: %s", seed, e)
            out.append({"seed": seed, "status": "failed", "error": f"{type(e).__name__}: {e}",
                        "exit_code": exit_code_for(e)})
    return StabilitySummary.from_runs(out)


def write_runs_csv(summary, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "status"] + list(STABILITY_METRICS))
        for r in summary.runs:
            if r["status"] == "ok":
                rep = EvalReport.from_dict(r["report"])
                w.writerow([r["seed"], "ok"] + [repr(f(rep)) for f in STABILITY_METRICS.values()])
            else:
                w.writerow([r["seed"], r["status"]] + [""] * len(STABILITY_METRICS))


# -- scalability --------------------------------------------------------------------


class RssSampler:
    """Peak resident set size of this process, polled on a background thread."""

    def __init__(self, interval=0.1):
        self.interval = interval
        self.proc = psutil.Process()
        self.peak = 0
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True)

    def _sample(self):
        self.peak = max(self.peak, self.proc.memory_info().rss)

    def _loop(self):
        while not self._stop.wait(self.interval):
            self._sample()

    def __enter__(self):
        self._sample()
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self._sample()


def linear_fit(x, y):
    """Least-squares ``y = a x + b`` and its coefficient of determination."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        return {"a": math.nan, "b": math.nan, "r2": math.nan}
    A = np.stack([x, np.ones_like(x)], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(np.sum((y - (a * x + b)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return {"a": float(a), "b": float(b), "r2": r2}


def fraction_subset(train, fraction, seed=0):
    """Stratified subsample holding ``fraction`` of every class."""
    if fraction == 1.0:
        return train
    from .preprocess import split_indices

    keep, _ = split_indices(train.labels, fraction, stratified=True, seed=seed)
    sub = train.subset(keep, scale_fraction=fraction)
    empty = [c for c, (k0, k1) in zip(train.classes, zip(train.class_counts(), sub.class_counts()))
             if k0 > 0 and k1 == 0]
    if empty:
        raise DataError(f"fraction {fraction} leaves no samples for {empty}")
    return sub


@dataclass
class ScalingTable:
    rows: list[dict]
    fit: dict
    total_memory: int

    def to_json(self):
        return json.dumps({"schema": SCALING_SCHEMA, **asdict(self)}, sort_keys=True, indent=2)


def scalability_run(train, fractions, fit_and_eval, seed=0):
    """Run ``fit_and_eval(subset) -> (report, train_seconds)`` per fraction.

    Records accuracy, training wall clock, per-record latency and peak
    resident memory, then fits training time against sample count.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0 < f <= 1 for f in fractions) or fractions != sorted(set(fractions)):
        raise ConfigError(f"fractions must be strictly ascending values in (0, 1], got {fractions}")
    total = psutil.virtual_memory().total
    rows = []
    for f in fractions:
        sub = fraction_subset(train, f, seed)
        with RssSampler() as rss:
            report, seconds = fit_and_eval(sub)
        rows.append({"fraction": f, "n_train": len(sub), "macro_accuracy": report.macro["accuracy"],
                     "micro_accuracy": report.micro["accuracy"], "train_seconds": seconds,
                     "latency_per_record": report.latency_per_record,
                     "mean_batch_seconds": report.mean_batch_seconds,
                     "detection_seconds": report.detection_seconds,
                     "peak_rss_bytes": rss.peak, "peak_rss_percent": 100.0 * rss.peak / total})
        log.info("fraction %.2f: n=%d train %.2fs", f, len(sub), seconds)
    fit = linear_fit([r["n_train"] for r in rows], [r["train_seconds"] for r in rows])
    return ScalingTable(rows, fit, total)


def write_scaling_csv(table, path):
    keys = list(table.rows[0]) if table.rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        w.writerows(table.rows)
