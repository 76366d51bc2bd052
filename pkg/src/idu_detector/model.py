"""Densely connected classifier with per-block token self-attention.

Block ``l`` sees the normalised input and every earlier block output
concatenated, applies BN -> ReLU -> FC, then adds a self-attention read of
its own activation back onto it.  The head reads the concatenation of the
normalised input and all block outputs.

Attention on a flat activation ``h`` of width ``w`` treats it as ``w / g``
tokens of ``g`` scalars (zero padded to a multiple of ``g``).  Each token is
embedded to ``d_k`` dims, attends over the other tokens of the same sample,
and is projected back to one scalar that is repeated over its ``g`` slots.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Graph, RunningStats, backward
from .errors import ConfigError, NumericError, ShapeError

DEFAULT_WIDTHS = (512, 512, 256, 128, 64, 32, 16)
RUNNING_SUFFIXES = (".running_mean", ".running_var")


@dataclass
class ModelConfig:
    d0: int
    n_classes: int
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    d_k: int = 16
    g: int = 1
    dropout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.d0 < 1 or self.n_classes < 2:
            raise ConfigError(f"need d0 >= 1 and at least two classes, got d0={self.d0} C={self.n_classes}")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError(f"widths must be a non-empty list of positive ints, got {self.widths}")
        if self.d_k < 1 or self.g < 1:
            raise ConfigError(f"d_k and g must be >= 1, got d_k={self.d_k} g={self.g}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def n_blocks(self):
        return len(self.widths)

    def block_inputs(self):
        """Input width of each block: d0 plus all earlier block widths."""
        return [self.d0 + sum(self.widths[:l]) for l in range(self.n_blocks)]

    @property
    def head_input(self):
        return self.d0 + sum(self.widths)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "widths": tuple(d["widths"])})


def expected_shapes(cfg):
    """Every stored tensor name and shape, in checkpoint order."""
    shapes = {"input.bn.gamma": (cfg.d0,), "input.bn.beta": (cfg.d0,),
              "input.bn.running_mean": (cfg.d0,), "input.bn.running_var": (cfg.d0,)}
    for l, (w, d_in) in enumerate(zip(cfg.widths, cfg.block_inputs()), start=1):
        p = f"block{l}"
        shapes.update({
            f"{p}.bn.gamma": (d_in,), f"{p}.bn.beta": (d_in,),
            f"{p}.bn.running_mean": (d_in,), f"{p}.bn.running_var": (d_in,),
            f"{p}.W": (w, d_in), f"{p}.b": (w,),
            f"{p}.att.U": (cfg.d_k, cfg.g), f"{p}.att.c": (cfg.d_k,),
            f"{p}.att.Wq": (cfg.d_k, cfg.d_k), f"{p}.att.Wk": (cfg.d_k, cfg.d_k),
            f"{p}.att.Wv": (cfg.d_k, cfg.d_k), f"{p}.att.p": (cfg.d_k,),
        })
    shapes["head.W"] = (cfg.n_classes, cfg.head_input)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


def is_running(name):
    return name.endswith(RUNNING_SUFFIXES)


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def trainable(self):
        return [n for n in self.tensors if not is_running(n)]

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def count(self):
        """Number of trainable scalars."""
        return sum(self.tensors[n].size for n in self.trainable())

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def running(self, prefix):
        return RunningStats(self.tensors[f"{prefix}.running_mean"], self.tensors[f"{prefix}.running_var"])

    def store_running(self, prefix, stats):
        self.tensors[f"{prefix}.running_mean"] = stats.mean
        self.tensors[f"{prefix}.running_var"] = stats.var


def audit(params, cfg):
    """Raise ShapeError unless params hold exactly the tensors ``cfg`` implies."""
    want = expected_shapes(cfg)
    have = {k: tuple(v.shape) for k, v in params.tensors.items()}
    if have != want:
        missing = sorted(set(want) - set(have))
        extra = sorted(set(have) - set(want))
        wrong = sorted(k for k in set(want) & set(have) if want[k] != have[k])
        raise ShapeError(f"parameter audit failed: missing={missing} extra={extra} "
                         f"wrong={[(k, have[k], want[k]) for k in wrong]}")
    bad = [k for k, v in params.tensors.items() if not np.all(np.isfinite(v))]
    if bad:
        raise NumericError(f"non-finite parameters: {bad}")


def init_params(cfg, dtype=np.float32):
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for name, shape in expected_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf in ("gamma", "running_var"):
            v = np.ones(shape)
        elif leaf in ("beta", "running_mean", "b", "c"):
            v = np.zeros(shape)
        elif leaf == "W":
            v = rng.normal(0.0, math.sqrt(2.0 / shape[1]), size=shape)
        elif leaf == "U":
            v = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), size=shape)
        else:  # Wq, Wk, Wv, p
            v = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_k), size=shape)
        out[name] = v.astype(dtype)
    return ModelParams(out)


def attend(g, h, U, c, Wq, Wk, Wv, p, group=1):
    """Token self-attention over the columns of ``h`` (B x w); returns B x w."""
    batch, w = h.shape
    d_k = c.shape[0]
    pad = (-w) % group
    t = (w + pad) // group
    tokens = g.reshape(g.pad_cols(h, pad), (batch, t, group))
    E = g.add(g.matmul(tokens, g.transpose(U)), c)
    A = g.scaled_dot_attention(g.matmul(E, Wq), g.matmul(E, Wk), g.matmul(E, Wv))
    scalar = g.matmul(A, g.reshape(p, (d_k, 1)))
    spread = g.matmul(scalar, g.constant(np.ones((1, group))))
    return g.slice_cols(g.reshape(spread, (batch, w + pad)), 0, w)


def build(g, params, cfg, X, mode="train", rng=None, attention=True):
    """Record the forward pass on ``g``; returns the probability node.

    Train mode normalises with batch statistics and updates the running
    statistics held in ``params``.  ``attention=False`` skips the attention
    branch entirely, giving the plain densely connected network.
    """
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != cfg.d0:
        raise ShapeError(f"input must be B x {cfg.d0}, got {X.shape}")
    P = {n: g.param(n, params.tensors[n]) for n in params.trainable()}

    def bn(x, prefix):
        stats = params.running(prefix)
        out = g.batchnorm1d(x, P[f"{prefix}.gamma"], P[f"{prefix}.beta"], mode=mode, running=stats)
        if mode == "train":
            params.store_running(prefix, stats)
        return out

    z0 = bn(g.constant(X), "input.bn")
    feats = [z0]
    for l in range(1, cfg.n_blocks + 1):
        pre = f"block{l}"
        try:
            x = g.concat_cols(feats)
            a = g.relu(bn(x, f"{pre}.bn"))
            h = g.add(g.matmul(a, g.transpose(P[f"{pre}.W"])), P[f"{pre}.b"])
            if attention:
                att = attend(g, h, *(P[f"{pre}.att.{k}"] for k in ("U", "c", "Wq", "Wk", "Wv", "p")), group=cfg.g)
                h = g.add(att, h)
            feats.append(g.dropout(h, cfg.dropout, mode, rng))
        except NumericError as e:
            raise NumericError(f"block {l}: {e}") from None
    logits = g.add(g.matmul(g.concat_cols(feats), g.transpose(P["head.W"])), P["head.b"])
    return g.softmax_rows(logits)


def forward(params, cfg, X, mode="infer", rng=None, dtype=np.float32, attention=True):
    """Class probabilities for ``X`` (B x d0)."""
    g = Graph(dtype)
    return build(g, params, cfg, X, mode, rng, attention).value


def predict_proba(params, cfg, X, batch_size=2048):
    """Inference in chunks so large inputs do not build one huge attention tensor."""
    X = np.asarray(X, dtype=np.float32)
    if len(X) == 0:
        return np.zeros((0, cfg.n_classes), dtype=np.float32)
    return np.concatenate([forward(params, cfg, X[i:i + batch_size]) for i in range(0, len(X), batch_size)])


def loss_value(probs, onehot):
    """Mean cross-entropy with 1e-12 inside the log."""
    g = Graph(np.float64)
    return float(g.cross_entropy(g.constant(probs), onehot).value)


def loss_and_grads(params, cfg, X, Y, mode="train", rng=None, dtype=np.float32):
    g = Graph(dtype)
    probs = build(g, params, cfg, X, mode, rng)
    loss = g.cross_entropy(probs, Y)
    return float(loss.value), probs.value, backward(g, loss)
