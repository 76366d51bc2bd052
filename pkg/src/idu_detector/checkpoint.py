"""Binary checkpoint for classifier parameters.

Layout, all integers little-endian::

    b"IDUD" | u32 version | u32 meta_len | meta (UTF-8 JSON) | tensors...

and each tensor is ``u16 name_len | name | u8 rank | u32 dims[rank] | f32 data``.
The metadata holds the model config, class names, the tensor count and a
SHA-256 of the tensor section, plus whatever extra keys the caller passes
(encoder spec, feature manifest, run digest).
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import (CheckpointDigestMismatch, CheckpointError, CheckpointShapeMismatch, MagicMismatch,
                     TruncatedCheckpoint, VersionMismatch)
from .model import ModelConfig, ModelParams, expected_shapes

MAGIC = b"IDUD"
VERSION = 1


def _tensor_bytes(params, cfg):
    out = bytearray()
    for name, shape in expected_shapes(cfg).items():
        arr = np.asarray(params.tensors[name])
        if tuple(arr.shape) != shape:
            raise CheckpointShapeMismatch(f"tensor {name} has shape {arr.shape}, config implies {shape}")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    return bytes(out)


def dumps(params, cfg, classes, **meta):
    body = _tensor_bytes(params, cfg)
    header = {**meta, "config": cfg.to_dict(), "classes": list(classes),
              "tensor_count": len(expected_shapes(cfg)), "tensor_digest": hashlib.sha256(body).hexdigest()}
    blob = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + body


def save_checkpoint(params, cfg, path, classes, **meta):
    data = dumps(params, cfg, classes, **meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpoint(f"checkpoint ends inside {what} (need {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data):
    """Parse checkpoint bytes into ``(params, config, meta)``."""
    r = _Reader(data)
    magic = r.take(4, "magic") if len(data) >= 4 else data
    if magic != MAGIC:
        raise MagicMismatch(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, this build reads {VERSION}")
    (meta_len,) = r.unpack("<I", "metadata length")
    raw = r.take(meta_len, "metadata")
    try:
        meta = json.loads(raw.decode("utf-8"))
        cfg = ModelConfig.from_dict(meta["config"])
        meta["tensor_count"], meta["tensor_digest"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"unreadable checkpoint metadata: {e}") from None
    want = expected_shapes(cfg)
    body_start = r.pos
    tensors = {}
    for _ in range(meta["tensor_count"]):
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointDigestMismatch(f"{len(data) - r.pos} unexpected trailing bytes")
    if hashlib.sha256(data[body_start:]).hexdigest() != meta["tensor_digest"]:
        raise CheckpointDigestMismatch("tensor section does not match the recorded digest")
    have = {k: tuple(v.shape) for k, v in tensors.items()}
    if have != want:
        raise CheckpointShapeMismatch("stored tensors do not match the shapes the stored config implies")
    return ModelParams({k: v.astype(np.float32) for k, v in tensors.items()}), cfg, meta


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
