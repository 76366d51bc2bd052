"""Random forest with Gini splits, used only to rank and select input features."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

MANIFEST_MAGIC = "# idu-feature-manifest 1"


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    hist: np.ndarray | None = None
    decrease: float = 0.0

    @property
    def is_leaf(self):
        return self.feature < 0


@dataclass
class Tree:
    nodes: list[TreeNode]

    def apply(self, X):
        X = np.asarray(X)
        out = np.zeros(len(X), dtype=np.int64)
        stack = [(0, np.arange(len(X)))]
        while stack:
            nid, idx = stack.pop()
            node = self.nodes[nid]
            if node.is_leaf or idx.size == 0:
                out[idx] = nid
                continue
            go_left = X[idx, node.feature] <= node.threshold
            stack.append((node.left, idx[go_left]))
            stack.append((node.right, idx[~go_left]))
        return out

    def predict(self, X):
        return np.array([self.nodes[n].hist.argmax() for n in self.apply(X)], dtype=np.int64)


@dataclass
class ForestModel:
    trees: list[Tree]
    n_features: int
    n_classes: int
    tree_seeds: list[int]
    importances: np.ndarray
    params: dict = field(default_factory=dict)

    def predict(self, X):
        votes = np.zeros((len(X), self.n_classes))
        for t in self.trees:
            votes[np.arange(len(X)), t.predict(X)] += 1
        return votes.argmax(axis=1)

    def digest(self):
        h = hashlib.sha256()
        for t in self.trees:
            for n in t.nodes:
                h.update(np.array([n.feature, n.left, n.right], dtype=np.int64).tobytes())
                h.update(np.float64(n.threshold).tobytes())
                if n.hist is not None:
                    h.update(n.hist.astype(np.int64).tobytes())
        h.update(self.importances.astype(np.float64).tobytes())
        return h.hexdigest()


def _gini_from_counts(counts, n):
    return 1.0 - np.sum((counts / n) ** 2, axis=-1)


def best_split_on_feature(x, y_onehot, min_leaf):
    """Best threshold on one feature by weighted child Gini.

    Returns ``(weighted_child_gini, threshold)`` or ``None`` when no split
    leaves at least ``min_leaf`` samples on both sides.
    """
    n = len(x)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cum = np.cumsum(y_onehot[order], axis=0)
    # split after position i: left = [0..i], right = [i+1..n-1]
    lo, hi = min_leaf - 1, n - min_leaf - 1
    if hi < lo:
        return None
    pos = np.arange(lo, hi + 1)
    pos = pos[xs[pos] < xs[pos + 1]]
    if pos.size == 0:
        return None
    left = cum[pos]
    right = cum[-1] - left
    nl = (pos + 1).astype(np.float64)
    nr = n - nl
    weighted = (nl * _gini_from_counts(left, nl[:, None]) + nr * _gini_from_counts(right, nr[:, None])) / n
    best = int(np.argmin(weighted))
    i = pos[best]
    return float(weighted[best]), float((xs[i] + xs[i + 1]) / 2.0)


def fit_tree(X, y, n_classes, rng, max_depth=12, min_leaf=5, mtry=None):
    """Grow one CART tree; returns the tree and its raw importance vector."""
    n_samples, d = X.shape
    mtry = d if mtry is None else mtry
    eye = np.eye(n_classes)
    importance = np.zeros(d)
    nodes = [TreeNode()]
    stack = [(0, np.arange(n_samples), 0)]
    while stack:
        nid, idx, depth = stack.pop()
        hist = np.bincount(y[idx], minlength=n_classes)
        node = nodes[nid]
        n = idx.size
        if depth >= max_depth or n < 2 * min_leaf or hist.max() == n:
            node.hist = hist
            continue
        parent = float(_gini_from_counts(hist.astype(np.float64), n))
        y_oh = eye[y[idx]]
        best = None
        features = rng.permutation(d)
        for tried, j in enumerate(features):
            # keep drawing past mtry only while nothing splittable was found
            if tried >= mtry and best is not None:
                break
            found = best_split_on_feature(X[idx, j], y_oh, min_leaf)
            if found is not None and (best is None or found[0] < best[0]):
                best = (found[0], found[1], int(j))
        if best is None:
            node.hist = hist
            continue
        weighted, thr, j = best
        decrease = max(parent - weighted, 0.0)
        importance[j] += n / n_samples * decrease
        go_left = X[idx, j] <= thr
        node.feature, node.threshold, node.decrease = j, thr, decrease
        node.left, node.right = len(nodes), len(nodes) + 1
        nodes += [TreeNode(), TreeNode()]
        stack.append((node.right, idx[~go_left], depth + 1))
        stack.append((node.left, idx[go_left], depth + 1))
    return Tree(nodes), importance


def fit_forest(X, y, n_trees=100, max_depth=12, min_leaf=5, mtry=None, seed=0, n_classes=None):
    """Bootstrap-aggregated Gini trees and their mean-decrease-in-impurity ranking."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError(f"fit_forest needs X[N x d] and y[N], got {X.shape} and {y.shape}")
    if len(X) < 2:
        raise DataError("fit_forest needs at least two samples")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    if y.min() < 0 or y.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes})")
    if max_depth is None:
        max_depth = math.inf
    d = X.shape[1]
    mtry = math.ceil(math.sqrt(d)) if mtry is None else int(mtry)
    if not 1 <= mtry <= d or n_trees < 1 or min_leaf < 1:
        raise ConfigError(f"invalid forest parameters n_trees={n_trees} mtry={mtry} min_leaf={min_leaf}")
    if np.unique(y).size == 1:
        log.warning("constant labels: every tree is a single leaf and all importances are zero")
    seeds = [int(s) for s in np.random.SeedSequence(seed).generate_state(n_trees)]
    trees, total = [], np.zeros(d)
    for s in seeds:
        rng = np.random.default_rng(s)
        boot = rng.integers(0, len(X), size=len(X))
        tree, imp = fit_tree(X[boot], y[boot], n_classes, rng, max_depth, min_leaf, mtry)
        trees.append(tree)
        total += imp
    total /= n_trees
    norm = total.sum()
    importances = total / norm if norm > 0 else np.zeros(d)
    params = {"n_trees": n_trees, "max_depth": None if max_depth == math.inf else max_depth,
              "min_leaf": min_leaf, "mtry": mtry, "seed": seed}
    return ForestModel(trees, d, n_classes, seeds, importances, params)


def select_top_k(model_or_importances, k):
    """Indices of the ``k`` largest importances; ties go to the lower index."""
    imp = getattr(model_or_importances, "importances", model_or_importances)
    imp = np.asarray(imp, dtype=np.float64)
    if not 1 <= k <= len(imp):
        raise ConfigError(f"k must lie in [1, {len(imp)}], got {k}")
    return sorted(range(len(imp)), key=lambda j: (-imp[j], j))[:k]


def project(dataset, indices):
    indices = [int(i) for i in indices]
    d = dataset.X.shape[1]
    bad = [i for i in indices if not 0 <= i < d]
    if bad:
        raise ConfigError(f"feature indices out of range [0, {d}): {bad}")
    from .preprocess import EncodedDataset

    return EncodedDataset(dataset.X[:, indices], dataset.Y, [dataset.columns[i] for i in indices],
                          list(dataset.classes), dict(dataset.provenance))


@dataclass
class FeatureManifest:
    indices: list[int]
    names: list[str]
    importances: list[float]
    meta: dict = field(default_factory=dict)

    def digest(self):
        body = "".join(f"{i}\t{n}\n" for i, n in zip(self.indices, self.names))
        return hashlib.sha256(body.encode("utf-8")).hexdigest()

    def to_text(self):
        lines = [MANIFEST_MAGIC]
        lines += [f"# {k} {v}" for k, v in sorted(self.meta.items())]
        lines.append("index\tname\timportance")
        lines += [f"{i}\t{n}\t{imp!r}" for i, n, imp in zip(self.indices, self.names, self.importances)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = text.splitlines()
        if not lines or lines[0] != MANIFEST_MAGIC:
            raise DataError("not a feature manifest")
        meta, idx, names, imps = {}, [], [], []
        for line in lines[1:]:
            if line.startswith("# "):
                key, _, value = line[2:].partition(" ")
                meta[key] = value
            elif line and line != "index\tname\timportance":
                i, n, imp = line.split("\t")
                idx.append(int(i))
                names.append(n)
                imps.append(float(imp))
        return cls(idx, names, imps, meta)

    def check_columns(self, columns):
        """Raise unless ``columns`` (the unprojected names) align with this manifest."""
        for i, n in zip(self.indices, self.names):
            if i >= len(columns) or columns[i] != n:
                raise DataError(f"feature manifest column {i} ({n!r}) does not match the dataset")


def build_manifest(model, columns, k, **meta):
    idx = select_top_k(model, k)
    return FeatureManifest(idx, [columns[i] for i in idx], [float(model.importances[i]) for i in idx],
                           dict(meta))
