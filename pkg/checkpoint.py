"""
Named-tensor container.

Layout (all integers little-endian):

    b"RSVC"                    magic
    u32 version
    u32 n, n bytes             metadata, UTF-8 JSON object
    u32 count
    count x entry:
        u16 n, n bytes         name, UTF-8
        u8  rank
        rank x u32             dims
        prod(dims) x f32       values, row-major
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError
from layers import Module


log = logging.getLogger("checkpoint")

MAGIC = b"RSVC"
FORMAT_VERSION = 1


@dataclass
class ModelCheckpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        a = np.asarray(arr)
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"tensor {name!r} holds non-finite values")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if a.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} rank {a.ndim} too large")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, path: str) -> None:
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, where: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(self.path, where)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, where: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), where))


def decode_checkpoint(data: bytes, path: str = "<bytes>") -> ModelCheckpoint:
    if len(data) < 4:
        raise TruncatedCheckpointError(path, "magic")
    if data[:4] != MAGIC:
        raise BadMagicError(path, data[:4])
    r = _Reader(data, path)
    r.pos = 4
    (version,) = r.unpack("<I", "header")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(path, version, FORMAT_VERSION)
    (meta_len,) = r.unpack("<I", "header")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8")) if meta_len else {}
    (count,) = r.unpack("<I", "header")

    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        where = f"entry #{i}"
        (name_len,) = r.unpack("<H", where)
        name = r.take(name_len, where).decode("utf-8")
        where = f"tensor {name!r}"
        (rank,) = r.unpack("<B", where)
        dims = r.unpack(f"<{rank}I", where) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        raw = r.take(4 * n, where)
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    return ModelCheckpoint(tensors, meta)


def save_checkpoint(models: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(models, meta)
    p.write_bytes(payload)
    log.debug("saved %d tensors (%d bytes) to %s", len(models), len(payload), p)
    return p


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    ckpt = decode_checkpoint(p.read_bytes(), str(p))
    log.debug("loaded %d tensors from %s", len(ckpt.tensors), p)
    return ckpt


# -----------------------------
# Module helpers
# -----------------------------
def save_module(module: Module, path: str | Path, meta: Mapping[str, Any] | None = None) -> Path:
    payload = dict(meta or {})
    payload.setdefault("parameter_hash", module.parameter_hash())
    return save_checkpoint(module.state_dict(), payload, path)


def load_module_state(module: Module, path: str | Path) -> dict[str, Any]:
    """Load weights into an already-built module; returns the stored metadata."""
    ckpt = load_checkpoint(path)
    module.load_state_dict(ckpt.tensors, strict=True)
    return ckpt.meta
