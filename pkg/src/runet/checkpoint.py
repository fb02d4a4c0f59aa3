"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic       8 bytes  b"RUNETCKP"
    version     u32
    spec_len    u32, then spec_len bytes of UTF-8 JSON (model spec)
    meta_len    u32, then meta_len bytes of UTF-8 JSON (epoch, best_miou, ...)
    2 x section:  count u32, then `count` tensor records
                  (model tensors first, optimizer velocities second)

    record:     name_len u16, name (UTF-8), dtype code u8, ndim u8,
                ndim x u32 dims, nbytes u64, raw little-endian scalars
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import CheckpointFormatError
from .models import ModelSpec, build_model
from .nn import Module

MAGIC = b"RUNETCKP"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


@dataclass
class Checkpoint:
    model_spec: ModelSpec
    tensors: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    best_miou: float = 0.0
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise CheckpointFormatError(f"{name}: unsupported dtype {arr.dtype}")
    raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<Q", len(raw)) + raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.format_version)]
    meta = dict(ckpt.meta, epoch=ckpt.epoch, best_miou=ckpt.best_miou)
    for blob in (json.dumps(ckpt.model_spec.to_dict(), sort_keys=True),
                 json.dumps(meta, sort_keys=True)):
        b = blob.encode("utf-8")
        parts += [struct.pack("<I", len(b)), b]
    for section in (ckpt.tensors, ckpt.velocity):
        parts.append(struct.pack("<I", len(section)))
        parts += [_pack_record(name, arr) for name, arr in section.items()]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated {what} at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def record(self) -> tuple[str, np.ndarray]:
        start = self.pos
        (nlen,) = self.unpack("<H", "record name length")
        name = self.take(nlen, "record name").decode("utf-8")
        code, ndim = self.unpack("<BB", f"record header of {name!r}")
        if code not in _DTYPES:
            raise CheckpointFormatError(f"unknown dtype code {code} in record at offset {start}")
        dims = self.unpack(f"<{ndim}I", f"dims of {name!r}")
        (nbytes,) = self.unpack("<Q", f"length of {name!r}")
        dtype = _DTYPES[code]
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointFormatError(f"record {name!r} at offset {start}: length does not match shape")
        raw = self.take(nbytes, f"data of {name!r}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        return name, arr


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic bytes: not a checkpoint file")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    blobs = []
    for what in ("model spec", "metadata"):
        (n,) = r.unpack("<I", f"{what} length")
        try:
            blobs.append(json.loads(r.take(n, what).decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt {what}: {exc}") from None
    sections = []
    for what in ("tensor", "velocity"):
        (count,) = r.unpack("<I", f"{what} count")
        sections.append(dict(r.record() for _ in range(count)))
    if r.pos != len(buf):
        raise CheckpointFormatError(f"trailing bytes after offset {r.pos}")
    spec_d, meta = blobs
    try:
        spec = ModelSpec.from_dict(spec_d)
    except Exception as exc:
        raise CheckpointFormatError(f"invalid model spec: {exc}") from None
    epoch = int(meta.pop("epoch", 0))
    best = float(meta.pop("best_miou", 0.0))
    return Checkpoint(spec, sections[0], sections[1], epoch, best, meta, version)


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    """Write atomically: a temp file in the target directory, then rename."""
    path = Path(path)
    data = encode_checkpoint(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_from_model(model: Module, velocity: Optional[dict] = None, epoch: int = 0,
                          best_miou: float = 0.0, meta: Optional[dict] = None) -> Checkpoint:
    tensors = {k: np.array(v) for k, v in model.state_dict().items()}
    vel = {k: np.array(v) for k, v in (velocity or {}).items()}
    return Checkpoint(model.spec, tensors, vel, epoch, best_miou, dict(meta or {}))


def model_from_checkpoint(ckpt: Checkpoint) -> Module:
    model = build_model(ckpt.model_spec)
    first = next(iter(ckpt.tensors.values()), None)
    if first is not None and first.dtype != np.float32:
        model.to(first.dtype)
    try:
        model.load_state_dict(ckpt.tensors)
    except Exception as exc:
        raise CheckpointFormatError(f"checkpoint does not match its model spec: {exc}") from None
    return model
