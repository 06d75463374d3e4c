"""Weight files: magic, format version, JSON model config, then a table of
named little-endian arrays (parameters and batch-norm buffers).

Layout::

    b"SDTW" u32 version
    u32 len, config JSON (utf-8)
    u32 count
    count x [u16 name_len, name, u8 dtype code, u8 ndim, ndim x u32 shape, raw data]
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .model import ModelConfig, SDTrack

MAGIC = b"SDTW"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class WeightFileError(ValueError):
    pass


def state_dict(model: SDTrack) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.named_parameters()}
    out.update(dict(model.named_buffers()))
    return out


def save_weights(model: SDTrack, path) -> None:
    blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    tensors = state_dict(model)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise WeightFileError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(dt).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise WeightFileError(f"truncated weight file while reading {what} at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_weights(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Parse a whole file; raises before anything is handed out."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise WeightFileError("bad magic: not a weight file")
    (version,) = r.unpack("<I", "header")
    if version != VERSION:
        raise WeightFileError(f"unsupported weight format version {version} (expected {VERSION})")
    (n,) = r.unpack("<I", "header")
    config = ModelConfig.from_dict(json.loads(r.take(n, "config").decode()))
    (count,) = r.unpack("<I", "header")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H", "name")
        name = r.take(ln, "name").decode()
        code, ndim = r.unpack("<BB", name)
        shape = r.unpack(f"<{ndim}I", name)
        dt = _DTYPES.get(code)
        if dt is None:
            raise WeightFileError(f"{name}: unknown dtype code {code}")
        size = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size, name), dtype=dt).reshape(shape).copy()
    if r.pos != len(r.blob):
        raise WeightFileError(f"{len(r.blob) - r.pos} trailing bytes after parameter table")
    return config, tensors


def load_state(model: SDTrack, tensors: dict[str, np.ndarray]) -> None:
    expected = state_dict(model)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise WeightFileError(f"parameter name mismatch; missing={missing} extra={extra}")
    bad = [k for k, v in tensors.items() if v.shape != expected[k].shape]
    if bad:
        raise WeightFileError(f"shape mismatch for {bad}")
    params = dict(model.named_parameters())
    for name, arr in tensors.items():
        if name in params:
            params[name].data = arr.astype(params[name].data.dtype)
        else:
            mod_name, key = name.rsplit(".", 1)
            mod = dict(model.named_modules())[mod_name]
            mod.buffers[key] = arr.astype(mod.buffers[key].dtype)


def load_weights(path, model: SDTrack | None = None, config: ModelConfig | None = None) -> SDTrack:
    """Load into ``model`` (checked against its config) or build a fresh model
    from the stored config."""
    stored, tensors = read_weights(path)
    if model is None:
        model = SDTrack(config or stored, rng=0)
    load_state(model, tensors)
    return model
