"""Command line front end.

Every subcommand resolves a full RunConfig (flags over config file over
defaults), writes it next to its outputs as ``config-<digest>.json`` and
records each produced file with its SHA-256 in ``artifacts.json``.  Each
file also carries the config digest inside it so ``verify`` can check both.

Exit codes: 0 ok, 2 data error, 3 config error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, forest, ingest, ueba
from .errors import ConfigError, DataError, DigestMismatch, IDUError, exit_code_for
from .evaluate import evaluate_model, scalability_run, stability_run, write_runs_csv, write_scaling_csv
from .model import init_params, predict_proba
from .pipeline import (FLAG_FIELDS, RunConfig, apply_manifest, build_dataset, coerce, fit_model, resolve,
                       role_map, run_cycle, select_features, stage)
from .preprocess import EncodedDataset, EncoderSpec, transform
from .train import TrainingAborted

log = logging.getLogger("idu_detector")

INDEX = "artifacts.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are configuration errors, not data errors
        self.print_usage(sys.stderr)
        self.exit(3, f"{self.prog}: error: {message}\n")


# -- artifact bookkeeping ---------------------------------------------------------------


class Artifacts:
    def __init__(self, out, cfg):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.digest = cfg.digest()
        path = self.out / INDEX
        self.index = json.loads(path.read_text()) if path.exists() else {"files": {}, "configs": []}
        self.write_text(f"config-{self.digest[:16]}.json",
                        json.dumps({"config_digest": self.digest, "config": cfg.to_dict()}, indent=2, sort_keys=True),
                        record=False)
        if self.digest not in self.index["configs"]:
            self.index["configs"].append(self.digest)

    def path(self, name):
        return self.out / name

    def write_bytes(self, name, data, record=True):
        self.path(name).write_bytes(data)
        if record:
            self.index["files"][name] = {"sha256": hashlib.sha256(data).hexdigest(), "config_digest": self.digest}
        return self.path(name)

    def write_text(self, name, text, record=True):
        return self.write_bytes(name, text.encode("utf-8"), record)

    def record(self, name):
        return self.write_bytes(name, self.path(name).read_bytes())

    def save(self):
        self.path(INDEX).write_text(json.dumps(self.index, indent=2, sort_keys=True))


def embedded_digest(path):
    """The config digest stored inside an artifact file."""
    path = Path(path)
    if path.suffix == ".npz":
        return EncodedDataset.load(path).provenance.get("config_digest")
    if path.suffix == ".ckpt":
        return checkpoint.load_checkpoint(path)[2].get("config_digest")
    if path.suffix == ".json":
        return json.loads(path.read_text()).get("config_digest")
    if path.suffix == ".tsv":
        return forest.FeatureManifest.from_text(path.read_text()).meta.get("config_digest")
    first = path.read_text().split("\n", 1)[0]
    if first.startswith("# config_digest "):
        return first.split()[-1]
    return None


def with_digest_line(text, digest):
    return f"# config_digest {digest}\n{text}"


def csv_text(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def verify(out):
    """List of problems found in ``out``; empty when every digest checks."""
    out = Path(out)
    index_path = out / INDEX
    if not index_path.exists():
        return [f"{index_path} is missing"]
    index = json.loads(index_path.read_text())
    problems = []
    for digest in index["configs"]:
        cfg_path = out / f"config-{digest[:16]}.json"
        if not cfg_path.exists():
            problems.append(f"{cfg_path.name} is missing")
            continue
        stored = json.loads(cfg_path.read_text())
        if RunConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in stored["config"].items()}).digest() \
                != digest:
            problems.append(f"{cfg_path.name} does not hash to {digest}")
    for name, entry in sorted(index["files"].items()):
        p = out / name
        if not p.exists():
            problems.append(f"{name} is missing")
            continue
        if hashlib.sha256(p.read_bytes()).hexdigest() != entry["sha256"]:
            problems.append(f"{name} content changed since it was written")
            continue
        try:
            inner = embedded_digest(p)
        except (IDUError, ValueError, KeyError) as e:
            problems.append(f"{name}: unreadable ({e})")
            continue
        if inner != entry["config_digest"]:
            problems.append(f"{name} embeds config digest {inner}, index says {entry['config_digest']}")
        if entry["config_digest"] not in index["configs"]:
            problems.append(f"{name} refers to an unknown config {entry['config_digest']}")
    return problems


# -- subcommands -----------------------------------------------------------------------


def _dataset_paths(args, art):
    train = Path(args.train_file) if getattr(args, "train_file", None) else art.path("train.npz")
    test = Path(args.test_file) if getattr(args, "test_file", None) else art.path("test.npz")
    return train, test


def _load_npz(path):
    if not Path(path).exists():
        raise DataError(f"{path}: not found (run build-dataset first)")
    return EncodedDataset.load(path)


def cmd_build_dataset(cfg, args, art):
    data = build_dataset(cfg)
    data.train.save(art.path("train.npz"))
    data.test.save(art.path("test.npz"))
    art.record("train.npz")
    art.record("test.npz")
    art.write_text("encoder.json", json.dumps({"config_digest": art.digest, "spec": data.encoder.to_text(),
                                               "schema": [[c.name, c.kind] for c in data.encode_schema.columns]},
                                              indent=2, sort_keys=True))
    manifest = {"config_digest": art.digest, "task": cfg.task, "classes": data.classes,
                "columns": data.train.columns, "train_counts": data.train.class_counts().tolist(),
                "test_counts": data.test.class_counts().tolist(), "encoder_digest": data.encoder.digest(),
                "rejected_rows": len(data.rejects or [])}
    art.write_text("dataset.json", json.dumps(manifest, indent=2, sort_keys=True))
    if data.joined is not None:
        rows = ueba.synergistic_rows(data.joined)
        header = [c.name for c in data.encode_schema.columns]
        art.write_text("synergistic.csv", with_digest_line(csv_text(rows, header), art.digest))
    if data.rejects:
        art.write_text("rejects.json", json.dumps({"config_digest": art.digest, "rejects": [
            {"line": r.line, "reason": r.reason} for r in data.rejects]}, indent=2))
    print(json.dumps({"classes": data.classes, "train": len(data.train), "test": len(data.test),
                      "width": data.train.X.shape[1]}))
    return 0


def cmd_select(cfg, args, art):
    train_path, _ = _dataset_paths(args, art)
    manifest = select_features(_load_npz(train_path), cfg)
    art.write_text("features.tsv", manifest.to_text())
    print(json.dumps({"k": len(manifest.indices), "top": manifest.names[:5], "digest": manifest.digest()}))
    return 0


def _manifest(args, art):
    p = Path(args.manifest) if args.manifest else art.path("features.tsv")
    if not p.exists():
        raise DataError(f"{p}: not found (run select first)")
    return forest.FeatureManifest.from_text(p.read_text())


def _encoder_meta(art):
    p = art.path("encoder.json")
    return json.loads(p.read_text()) if p.exists() else {}


def cmd_train(cfg, args, art):
    train_path, _ = _dataset_paths(args, art)
    if args.dry_run:
        if train_path.exists():
            ds = _load_npz(train_path)
            d0 = len(_manifest(args, art).indices) if (args.manifest or art.path("features.tsv").exists()) \
                else ds.X.shape[1]
            n_classes = len(ds.classes)
        elif args.d0 and args.n_classes:
            d0, n_classes = args.d0, args.n_classes
        else:
            raise ConfigError("--dry-run needs a built dataset or both --d0 and --n-classes")
        mcfg = cfg.model_config(d0, n_classes)
        params = init_params(mcfg)
        print(json.dumps({"parameters": params.count(), "tensors": len(params.tensors), "d0": d0,
                          "classes": n_classes, "widths": list(mcfg.widths)}))
        return 0
    manifest = _manifest(args, art)
    train_ds = apply_manifest(_load_npz(train_path), manifest)
    meta = {"config_digest": art.digest, "manifest_digest": manifest.digest(), "task": cfg.task,
            "feature_manifest": manifest.to_text(), "run_config": cfg.to_dict(),
            "role_map": role_map(cfg).to_text()}
    enc = _encoder_meta(art)
    if enc:
        meta["encoder"] = enc["spec"]
        meta["encode_schema"] = enc["schema"]
    try:
        params, mcfg, history, seconds = fit_model(train_ds, cfg)
    except TrainingAborted as e:
        mcfg = cfg.model_config(train_ds.X.shape[1], len(train_ds.classes))
        art.write_bytes("model.aborted.ckpt", checkpoint.dumps(e.params, mcfg, train_ds.classes, **meta))
        art.save()
        raise
    meta["train_seconds"] = seconds
    art.write_bytes("model.ckpt", checkpoint.dumps(params, mcfg, train_ds.classes, **meta))
    rows = [[h["epoch"], repr(h["loss"]), repr(h["train_accuracy"]), repr(h["seconds"])] for h in history]
    art.write_text("history.csv", with_digest_line(csv_text(rows, ["epoch", "loss", "train_accuracy", "seconds"]),
                                                   art.digest))
    print(json.dumps({"parameters": params.count(), "train_seconds": seconds,
                      "final_loss": history[-1]["loss"] if history else None}))
    return 0


def _checkpoint(args, art):
    p = Path(args.checkpoint) if args.checkpoint else art.path("model.ckpt")
    if not p.exists():
        raise DataError(f"{p}: not found (run train first)")
    return checkpoint.load_checkpoint(p)


def cmd_eval(cfg, args, art):
    params, mcfg, meta = _checkpoint(args, art)
    _, test_path = _dataset_paths(args, art)
    manifest = forest.FeatureManifest.from_text(meta["feature_manifest"])
    test_ds = apply_manifest(_load_npz(test_path), manifest)
    report, pred = evaluate_model(params, mcfg, test_ds, classes=meta["classes"],
                                  expected_manifest=meta["manifest_digest"], train_seconds=meta.get("train_seconds"),
                                  seed=cfg.seed, config_digest=art.digest)
    art.write_text("report.json", report.to_json())
    rows = [[i, meta["classes"][t], meta["classes"][p]] for i, (t, p) in enumerate(zip(test_ds.labels, pred))]
    art.write_text("predictions.csv", with_digest_line(csv_text(rows, ["row", "true", "predicted"]), art.digest))
    print(json.dumps({"macro_accuracy": report.macro["accuracy"], "micro_accuracy": report.micro["accuracy"],
                      "macro_f1": report.macro["f1"]}))
    return 0


def cmd_stability(cfg, args, art):
    summary = stability_run(lambda seed: run_cycle(cfg.with_seed(seed)), cfg.runs, cfg.seed)
    for r in summary.runs:
        if r["status"] == "ok":
            art.write_text(f"run-{r['seed']}.json", json.dumps({"config_digest": art.digest, "report": r["report"]},
                                                               indent=2, sort_keys=True))
    art.write_text("stability.json", json.dumps({"config_digest": art.digest, **json.loads(summary.to_json())},
                                                indent=2, sort_keys=True))
    buf = art.path("runs.csv")
    write_runs_csv(summary, buf)
    art.write_text("runs.csv", with_digest_line(buf.read_text(), art.digest))
    stats = summary.stats.get("macro_accuracy", {})
    print(json.dumps({"runs": len(summary.runs), "failed": summary.failed, "mean": stats.get("mean"),
                      "std": stats.get("std"), "min": stats.get("min")}))
    if summary.failed:
        codes = [r.get("exit_code", 1) for r in summary.runs if r["status"] != "ok"]
        return max(codes)
    return 0


def cmd_scale(cfg, args, art):
    data = build_dataset(cfg)
    manifest = select_features(data.train, cfg)
    train_ds = apply_manifest(data.train, manifest)
    test_ds = apply_manifest(data.test, manifest)

    def fit_and_eval(sub):
        params, mcfg, _, seconds = fit_model(sub, cfg)
        report, _ = evaluate_model(params, mcfg, test_ds, expected_manifest=manifest.digest(), seed=cfg.seed)
        return report, seconds

    with stage("scale"):
        table = scalability_run(train_ds, cfg.fractions, fit_and_eval, cfg.seed)
    art.write_text("scaling.json", json.dumps({"config_digest": art.digest, **json.loads(table.to_json())},
                                              indent=2, sort_keys=True))
    buf = art.path("scaling.csv")
    write_scaling_csv(table, buf)
    art.write_text("scaling.csv", with_digest_line(buf.read_text(), art.digest))
    print(json.dumps({"fit": table.fit, "rows": len(table.rows)}))
    return 0


def parse_record(line, schema_cols):
    """Cells of one raw record, accepting full rows or feature-only rows."""
    cells = [c.strip() for c in next(csv.reader([line.strip()]))]
    kinds = [k for _, k in schema_cols]
    if len(cells) == len(kinds):
        return tuple(cells)
    feature_slots = [i for i, k in enumerate(kinds) if k in (ingest.CATEGORICAL, ingest.NUMERIC)]
    if len(cells) == len(feature_slots):
        full = [""] * len(kinds)
        for i, c in zip(feature_slots, cells):
            full[i] = c
        return tuple(full)
    raise DataError(f"record has {len(cells)} cells, expected {len(kinds)} or {len(feature_slots)}")


def cmd_predict(cfg, args, art):
    params, mcfg, meta = _checkpoint(args, art)
    if "encoder" not in meta:
        raise DataError("checkpoint carries no encoder spec; train it from a build-dataset output directory")
    line = args.record if args.record is not None else sys.stdin.readline()
    if not line.strip():
        raise DataError("no record given")
    cells = parse_record(line, meta["encode_schema"])
    spec = EncoderSpec.from_text(meta["encoder"])
    encoded = transform([cells], spec)
    manifest = forest.FeatureManifest.from_text(meta["feature_manifest"])
    manifest.check_columns(encoded.columns)
    x = encoded.X[:, manifest.indices]
    # a single row cannot use batch statistics; inference uses running statistics
    probs = predict_proba(params, mcfg, x)[0]
    classes = meta["classes"]
    best = classes[int(np.argmax(probs))]
    out = {"task": meta.get("task", "class"), "probabilities": {c: float(p) for c, p in zip(classes, probs)}}
    if out["task"] == "class":
        out["class"] = best
        roles = ingest.RoleMap(ingest.parse_mapping(meta["role_map"])) if "role_map" in meta else None
        out["role"] = roles(best) if roles else None
    else:
        out["role"] = best
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_verify(cfg, args, art):
    problems = verify(args.out)
    for p in problems:
        print(p)
    if problems:
        raise DigestMismatch(f"{len(problems)} artifact check(s) failed")
    print("ok")
    return 0


COMMANDS = {
    "build-dataset": cmd_build_dataset, "select": cmd_select, "train": cmd_train, "eval": cmd_eval,
    "stability": cmd_stability, "scale": cmd_scale, "predict": cmd_predict, "verify": cmd_verify,
}


def build_parser():
    p = _Parser(prog="idu-detector", description="Intrusion and insider detection pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key=value file; flags override it")
        s.add_argument("--out", help="output directory (default out)")
        for flag in FLAG_FIELDS:
            if flag == "out":
                continue
            s.add_argument("--" + flag.replace("_", "-"), dest=flag, metavar=flag.upper())
        s.add_argument("--train-file", help="encoded training set (default OUT/train.npz)")
        s.add_argument("--test-file", help="encoded test set (default OUT/test.npz)")
        s.add_argument("--manifest", help="feature manifest (default OUT/features.tsv)")
        s.add_argument("--checkpoint", help="model checkpoint (default OUT/model.ckpt)")
        if name == "train":
            s.add_argument("--dry-run", action="store_true", help="build the model, print its size, exit")
            s.add_argument("--d0", type=int, help="input width for --dry-run without a dataset")
            s.add_argument("--n-classes", type=int, help="class count for --dry-run without a dataset")
        if name == "predict":
            s.add_argument("--record", help="one raw record; read from stdin when absent")
    return p


def config_from_args(args):
    overrides = {}
    for flag, field_name in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = coerce(field_name, value)
    return resolve(overrides, args.config)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        args.out = cfg.out
        if args.command == "verify":
            return cmd_verify(cfg, args, None)
        art = Artifacts(cfg.out, cfg)
        try:
            return COMMANDS[args.command](cfg, args, art)
        finally:
            art.save()
    except IDUError as e:
        where = f" [{e.stage}]" if hasattr(e, "stage") else ""
        print(f"error{where}: {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code_for(e)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
