"""HVITCKPT binary container.

Layout (little-endian)::

    b"HVITCKPT"  u32 version=1  u64 len  config text (UTF-8 key=value lines)
    repeated: u64 name_len  name  u32 rank  u64 dims[rank]  f64 payload

Dataset samples reuse the record layout on its own (no header).
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import ViTConfig, ViTModel, param_shapes

MAGIC = b"HVITCKPT"
VERSION = 1


def write_record(fh, name: str, array: np.ndarray):
    arr = np.ascontiguousarray(array, dtype="<f8")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(arr.tobytes())


def _take(buf: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(buf):
        raise FormatError(f"truncated {what}", offset=pos)
    return buf[pos:pos + n]


def read_record(buf: bytes, pos: int) -> tuple[str, np.ndarray, int]:
    (nlen,) = struct.unpack("<Q", _take(buf, pos, 8, "record name length"))
    pos += 8
    try:
        name = _take(buf, pos, nlen, "record name").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("record name is not UTF-8", offset=pos) from exc
    pos += nlen
    (rank,) = struct.unpack("<I", _take(buf, pos, 4, f"rank of {name!r}"))
    pos += 4
    if rank > 32:
        raise FormatError(f"implausible rank {rank} for tensor {name!r}", offset=pos - 4)
    dims = struct.unpack(f"<{rank}Q", _take(buf, pos, 8 * rank, f"dims of {name!r}")) if rank else ()
    pos += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = _take(buf, pos, 8 * count, f"payload of {name!r}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    return name, arr, pos + 8 * count


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(model: ViTModel) -> bytes:
    fh = io.BytesIO()
    text = model.config.to_text().encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    fh.write(struct.pack("<Q", len(text)))
    fh.write(text)
    for name in param_shapes(model.config):
        write_record(fh, name, model.params[name])
    return fh.getvalue()


def loads(buf: bytes) -> ViTModel:
    if _take(buf, 0, 8, "magic") != MAGIC:
        raise FormatError("bad magic, not an HVITCKPT file", offset=0)
    (version,) = struct.unpack("<I", _take(buf, 8, 4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    (tlen,) = struct.unpack("<Q", _take(buf, 12, 8, "config length"))
    pos = 20
    try:
        config = ViTConfig.from_text(_take(buf, pos, tlen, "config text").decode("utf-8"))
    except (UnicodeDecodeError, ValueError, ConfigError) as exc:
        raise FormatError(f"invalid config header: {exc}", offset=pos) from exc
    pos += tlen
    shapes = param_shapes(config)
    params = {}
    while pos < len(buf):
        start = pos
        name, arr, pos = read_record(buf, pos)
        if name not in shapes:
            raise FormatError(f"unknown tensor {name!r}", offset=start)
        if name in params:
            raise FormatError(f"duplicate tensor {name!r}", offset=start)
        if arr.shape != shapes[name]:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, config implies {shapes[name]}", offset=start)
        params[name] = arr
    missing = [k for k in shapes if k not in params]
    if missing:
        raise FormatError(f"missing tensor {missing[0]!r}", offset=pos)
    return ViTModel(config, params)


def save_checkpoint(model: ViTModel, path):
    atomic_write_bytes(path, dumps(model))


def load_checkpoint(path) -> ViTModel:
    return loads(Path(path).read_bytes())
