"""Mini-batch Adam training for the dense attention classifier."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .model import ModelParams, audit, loss_and_grads

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 for batch normalisation")
        if self.epochs < 0 or self.lr < 0 or self.clip_norm <= 0:
            raise ConfigError(f"invalid training config {self}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam moment coefficients must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


class TrainingAborted(NumericError):
    """Raised when a step produces a non-finite loss, gradient or parameter.

    ``params`` holds the last finite parameters and ``history`` the epochs
    completed before the failure.
    """

    def __init__(self, message, params, history):
        super().__init__(message)
        self.params = params
        self.history = history


class Adam:
    def __init__(self, names, shapes, tcfg):
        self.cfg = tcfg
        self.t = 0
        self.m = {n: np.zeros(s) for n, s in zip(names, shapes)}
        self.v = {n: np.zeros(s) for n, s in zip(names, shapes)}

    def step(self, tensors, grads):
        """Updated copies of ``tensors``; the inputs are left untouched."""
        c = self.cfg
        self.t += 1
        out = {}
        for n, grad in grads.items():
            grad = grad.astype(np.float64)
            self.m[n] = c.beta1 * self.m[n] + (1 - c.beta1) * grad
            self.v[n] = c.beta2 * self.v[n] + (1 - c.beta2) * grad * grad
            mhat = self.m[n] / (1 - c.beta1 ** self.t)
            vhat = self.v[n] / (1 - c.beta2 ** self.t)
            p = tensors[n]
            out[n] = (p.astype(np.float64) - c.lr * mhat / (np.sqrt(vhat) + c.adam_eps)).astype(p.dtype)
        return out


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {n: g * scale for n, g in grads.items()}
    return grads, total


def train(params, cfg, X, Y, tcfg=None, on_epoch=None):
    """Fit ``params`` in place of a copy; returns ``(params, history)``.

    A trailing batch of one row is skipped because batch normalisation
    needs two.  With ``deterministic`` off, shuffling and dropout draw from
    fresh entropy instead of ``tcfg.seed``.
    """
    tcfg = tcfg or TrainConfig()
    X = np.asarray(X, dtype=np.float32)
    Y = np.asarray(Y, dtype=np.float32)
    if X.ndim != 2 or Y.shape != (len(X), cfg.n_classes):
        raise DataError(f"training data shapes X{X.shape} Y{Y.shape} do not fit the model")
    if len(X) < 2:
        raise DataError("training needs at least two rows")
    audit(params, cfg)
    params = params.copy()
    seed = tcfg.seed if tcfg.deterministic else None
    shuffle_rng, drop_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    names = params.trainable()
    opt = Adam(names, [params[n].shape for n in names], tcfg)
    labels = Y.argmax(axis=1)
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(len(X))
        total_loss, correct, seen = 0.0, 0, 0
        for i in range(0, len(X), tcfg.batch_size):
            idx = order[i:i + tcfg.batch_size]
            if len(idx) < 2:
                continue
            # updates replace arrays rather than mutate them, so a shallow copy suffices
            last_good = ModelParams(dict(params.tensors))
            try:
                loss, probs, grads = loss_and_grads(params, cfg, X[idx], Y[idx], "train", drop_rng)
                if not math.isfinite(loss):
                    raise NumericError(f"loss is {loss}")
                grads, norm = clip_global_norm(grads, tcfg.clip_norm)
                if not math.isfinite(norm):
                    raise NumericError("gradient norm is not finite")
                params.tensors.update(opt.step(params.tensors, grads))
                if not params.all_finite():
                    raise NumericError("parameter update produced non-finite values")
            except NumericError as e:
                log.error("epoch %d: aborting training: %s", epoch, e)
                raise TrainingAborted(f"epoch {epoch}: {e}", last_good, history) from None
            total_loss += loss * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == labels[idx]))
            seen += len(idx)
        rec = {"epoch": epoch, "loss": total_loss / max(seen, 1), "train_accuracy": correct / max(seen, 1),
               "seconds": time.perf_counter() - start}
        history.append(rec)
        log.info("epoch %d loss %.5f acc %.4f (%.1fs)", epoch, rec["loss"], rec["train_accuracy"], rec["seconds"])
        if on_epoch is not None:
            on_epoch(rec)
    return params, history
