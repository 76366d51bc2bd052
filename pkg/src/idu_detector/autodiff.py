"""Tape-based reverse-mode automatic differentiation over dense arrays.

Only the handful of operations the classifier needs are provided.  Values
are stored as numpy arrays in the graph's dtype (float32 by default) while
reductions (matrix products, batch statistics, softmax normalisers) are
accumulated in float64 and cast back.

A ``Graph`` is an append-only tape: every op appends a ``Node`` whose inputs
are earlier nodes, so insertion order is a valid topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UsageError

ACC = np.float64
LOG_EPS = 1e-12


@dataclass
class RunningStats:
    """Exponential moving averages used by batch normalisation at inference."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, width, dtype=np.float32, momentum=0.1):
        return cls(np.zeros(width, dtype=dtype), np.ones(width, dtype=dtype), momentum)


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple
    value: np.ndarray
    ctx: dict = field(default_factory=dict)
    name: str | None = None
    requires_grad: bool = False

    @property
    def shape(self):
        return self.value.shape


class Graph:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    # -- construction helpers -------------------------------------------------

    def _push(self, op, inputs, value, ctx=None, name=None, requires_grad=None):
        with np.errstate(over="ignore", invalid="ignore"):
            value = np.asarray(value, dtype=self.dtype)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite output from op {op!r}")
        if requires_grad is None:
            requires_grad = any(n.requires_grad for n in inputs)
        node = Node(len(self.nodes), op, tuple(inputs), value, ctx or {}, name, requires_grad)
        self.nodes.append(node)
        return node

    def param(self, name, value):
        """Register a learnable leaf whose gradient ``backward`` reports."""
        return self._push("param", (), value, name=name, requires_grad=True)

    def constant(self, value):
        return self._push("const", (), value, requires_grad=False)

    # -- linear algebra -------------------------------------------------------

    def matmul(self, a, b):
        """Matrix product; ``a`` may carry one leading batch axis."""
        if a.value.ndim not in (2, 3) or b.value.ndim not in (2, 3):
            raise ShapeError(f"matmul expects 2-D or 3-D operands, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
        if a.value.ndim == 3 and b.value.ndim == 3 and a.shape[0] != b.shape[0]:
            raise ShapeError(f"matmul batch dims disagree: {a.shape} x {b.shape}")
        out = np.matmul(a.value.astype(ACC), b.value.astype(ACC))
        return self._push("matmul", (a, b), out)

    def transpose(self, a):
        """Swap the last two axes."""
        if a.value.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 dims, got {a.shape}")
        return self._push("transpose", (a,), np.swapaxes(a.value, -1, -2))

    def add(self, a, b):
        """Elementwise sum; ``b`` may broadcast over the leading axes of ``a``."""
        if a.shape != b.shape and a.shape[a.value.ndim - b.value.ndim:] != b.shape:
            raise ShapeError(f"add cannot align {a.shape} and {b.shape}")
        return self._push("add", (a, b), a.value.astype(ACC) + b.value.astype(ACC))

    def reshape(self, a, shape):
        shape = tuple(shape)
        if math.prod(shape) != a.value.size:
            raise ShapeError(f"cannot reshape {a.shape} into {shape}")
        return self._push("reshape", (a,), a.value.reshape(shape))

    def concat_cols(self, parts):
        parts = list(parts)
        if not parts:
            raise ShapeError("concat_cols needs at least one part")
        rows = {p.shape[:-1] for p in parts}
        if len(rows) != 1:
            raise ShapeError(f"concat_cols row dims disagree: {[p.shape for p in parts]}")
        widths = [p.shape[-1] for p in parts]
        out = np.concatenate([p.value for p in parts], axis=-1)
        return self._push("concat", tuple(parts), out, {"widths": widths})

    def slice_cols(self, a, start, stop):
        if not 0 <= start <= stop <= a.shape[-1]:
            raise ShapeError(f"column slice [{start}:{stop}] out of range for {a.shape}")
        return self._push("slice", (a,), a.value[..., start:stop], {"start": start, "stop": stop})

    def pad_cols(self, a, n):
        """Append ``n`` zero columns."""
        if n == 0:
            return a
        pad = np.zeros(a.shape[:-1] + (n,), dtype=self.dtype)
        return self._push("pad", (a,), np.concatenate([a.value, pad], axis=-1), {"n": n})

    # -- nonlinearities -------------------------------------------------------

    def relu(self, a):
        return self._push("relu", (a,), np.maximum(a.value, 0))

    def softmax_rows(self, a):
        x = a.value.astype(ACC)
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
        node = self._push("softmax", (a,), p)
        node.ctx["p"] = p
        return node

    def dropout(self, a, rate, mode, rng):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        if mode == "infer" or rate == 0.0:
            return a
        if mode != "train":
            raise ConfigError(f"unknown mode {mode!r}")
        keep = (rng.random(a.shape) >= rate).astype(ACC) / (1.0 - rate)
        return self._push("dropout", (a,), a.value * keep, {"keep": keep})

    def batchnorm1d(self, x, gamma, beta, eps=1e-5, mode="train", running=None):
        """Per-feature batch normalisation of a ``B x d`` input.

        In train mode the batch mean and biased variance normalise the input
        and ``running`` (if given) is updated in place with the unbiased
        variance; in infer mode ``running`` supplies the statistics.
        """
        if x.value.ndim != 2:
            raise ShapeError(f"batchnorm1d expects B x d input, got {x.shape}")
        d = x.shape[1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError(f"batchnorm1d affine params must have shape ({d},)")
        xv = x.value.astype(ACC)
        if mode == "train":
            b = x.shape[0]
            if b < 2:
                raise ConfigError("batchnorm1d in train mode needs a batch of at least 2")
            mean = xv.mean(axis=0)
            var = xv.var(axis=0)
            if running is not None:
                # an overflowing batch is caught as non-finite output just below
                m = running.momentum
                with np.errstate(over="ignore", invalid="ignore"):
                    running.mean = ((1 - m) * running.mean + m * mean).astype(running.mean.dtype)
                    running.var = ((1 - m) * running.var + m * var * b / (b - 1)).astype(running.var.dtype)
        elif mode == "infer":
            if running is None:
                raise UsageError("batchnorm1d in infer mode needs running statistics")
            mean = running.mean.astype(ACC)
            var = running.var.astype(ACC)
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = (xv - mean) * inv_std
        out = gamma.value.astype(ACC) * xhat + beta.value.astype(ACC)
        return self._push("batchnorm", (x, gamma, beta), out,
                          {"xhat": xhat, "inv_std": inv_std, "mode": mode})

    # -- attention ------------------------------------------------------------

    def scaled_dot_attention(self, q, k, v):
        """softmax(Q K^T / sqrt(dk)) V over ``t x dk`` operands (optionally batched)."""
        if not (q.shape == k.shape == v.shape):
            raise ShapeError(f"attention operands disagree: {q.shape}, {k.shape}, {v.shape}")
        if q.value.ndim not in (2, 3):
            raise ShapeError(f"attention expects t x dk or B x t x dk, got {q.shape}")
        dk = q.shape[-1]
        if dk == 0:
            raise ShapeError("attention key width dk must be positive")
        scale = 1.0 / math.sqrt(dk)
        qv, kv, vv = (n.value.astype(ACC) for n in (q, k, v))
        s = np.matmul(qv, np.swapaxes(kv, -1, -2)) * scale
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
        out = np.matmul(p, vv)
        return self._push("attention", (q, k, v), out, {"p": p, "scale": scale})

    # -- reductions / losses --------------------------------------------------

    def sum_all(self, a):
        return self._push("sum", (a,), np.asarray(a.value.sum(dtype=ACC)))

    def cross_entropy(self, probs, onehot):
        """Mean categorical cross-entropy of probability rows against one-hot targets."""
        y = np.asarray(onehot, dtype=ACC)
        if y.shape != probs.shape:
            raise ShapeError(f"targets {y.shape} do not match probabilities {probs.shape}")
        p = probs.value.astype(ACC) + LOG_EPS
        loss = -(y * np.log(p)).sum(axis=1).mean()
        return self._push("xent", (probs,), np.asarray(loss), {"y": y, "p": p})


# -- reverse pass ---------------------------------------------------------------


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _vjp_matmul(node, g):
    a, b = (n.value.astype(ACC) for n in node.inputs)
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    if b.ndim == 2 and gb.ndim == 3:
        gb = gb.sum(axis=0)
    if a.ndim == 2 and ga.ndim == 3:
        ga = ga.sum(axis=0)
    return ga, gb


def _vjp_transpose(node, g):
    return (np.swapaxes(g, -1, -2),)


def _vjp_add(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_reshape(node, g):
    return (g.reshape(node.inputs[0].shape),)


def _vjp_concat(node, g):
    out, start = [], 0
    for w in node.ctx["widths"]:
        out.append(g[..., start:start + w])
        start += w
    return tuple(out)


def _vjp_slice(node, g):
    a = node.inputs[0]
    full = np.zeros(a.shape, dtype=ACC)
    full[..., node.ctx["start"]:node.ctx["stop"]] = g
    return (full,)


def _vjp_pad(node, g):
    return (g[..., :g.shape[-1] - node.ctx["n"]],)


def _vjp_relu(node, g):
    return (g * (node.inputs[0].value > 0),)


def _vjp_softmax(node, g):
    p = node.ctx["p"]
    return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def _vjp_dropout(node, g):
    return (g * node.ctx["keep"],)


def _vjp_batchnorm(node, g):
    _, gamma, _ = node.inputs
    xhat, inv_std = node.ctx["xhat"], node.ctx["inv_std"]
    gam = gamma.value.astype(ACC)
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxhat = g * gam
    if node.ctx["mode"] == "train":
        b = g.shape[0]
        dx = (inv_std / b) * (b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


def _vjp_attention(node, g):
    q, k, v = (n.value.astype(ACC) for n in node.inputs)
    p, scale = node.ctx["p"], node.ctx["scale"]
    dv = np.matmul(np.swapaxes(p, -1, -2), g)
    dp = np.matmul(g, np.swapaxes(v, -1, -2))
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    dq = np.matmul(ds, k) * scale
    dk = np.matmul(np.swapaxes(ds, -1, -2), q) * scale
    return dq, dk, dv


def _vjp_sum(node, g):
    return (np.full(node.inputs[0].shape, float(g), dtype=ACC),)


def _vjp_xent(node, g):
    y, p = node.ctx["y"], node.ctx["p"]
    return (-float(g) * y / p / y.shape[0],)


VJP = {
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "add": _vjp_add,
    "reshape": _vjp_reshape,
    "concat": _vjp_concat,
    "slice": _vjp_slice,
    "pad": _vjp_pad,
    "relu": _vjp_relu,
    "softmax": _vjp_softmax,
    "dropout": _vjp_dropout,
    "batchnorm": _vjp_batchnorm,
    "attention": _vjp_attention,
    "sum": _vjp_sum,
    "xent": _vjp_xent,
}


def backward(graph, loss):
    """Gradient of the scalar ``loss`` node with respect to every named param.

    Returns a dict mapping param name to a gradient array in the graph dtype.
    Params the loss does not depend on receive zeros.
    """
    if loss.value.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=ACC)}
    for node in reversed(graph.nodes[:loss.id + 1]):
        g = grads.pop(node.id, None) if node.op != "param" else grads.get(node.id)
        if g is None or not node.inputs:
            continue
        for inp, gi in zip(node.inputs, VJP[node.op](node, g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    out = {}
    for node in graph.nodes:
        if node.op == "param":
            g = grads.get(node.id)
            out[node.name] = (np.zeros(node.shape, dtype=graph.dtype) if g is None
                              else np.asarray(g, dtype=graph.dtype).reshape(node.shape))
    return out
