"""Binary checkpoint format.

Layout: magic ``X2EL``, one version byte, an 8-byte little-endian header
length, a JSON header, then a payload of little-endian float32 values. The
header maps each tensor name to ``{"shape", "dtype": "f32", "offset"}`` with
offsets in bytes from the start of the payload. Run metadata (config, step,
RNG description, sampler cache) lives under the reserved ``__meta__`` key.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError

MAGIC = b"X2EL"
VERSION = 1
META_KEY = "__meta__"
_PREFIX = len(MAGIC) + 1 + 8


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]  # float64 widened from the stored float32
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def config(self) -> dict:
        return self.meta.get("config", {})


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    header: dict = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if name == META_KEY:
            raise ValueError(f"tensor name {META_KEY!r} is reserved")
        data = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
        header[name] = {"shape": list(np.shape(tensors[name])), "dtype": "f32", "offset": offset}
        chunks.append(data)
        offset += len(data)
    header[META_KEY] = meta or {}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + bytes([VERSION]) + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(tensors, meta))
    os.replace(tmp, path)
    return path


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise FormatError(0, "bad magic bytes")
    if len(buf) < len(MAGIC) + 1:
        raise FormatError(len(MAGIC), "missing version byte")
    if buf[len(MAGIC)] != VERSION:
        raise VersionError(f"checkpoint version {buf[len(MAGIC)]} is not supported (expected {VERSION})")
    if len(buf) < _PREFIX:
        raise FormatError(len(MAGIC) + 1, "truncated header length")
    (hlen,) = struct.unpack("<Q", buf[len(MAGIC) + 1:_PREFIX])
    if len(buf) < _PREFIX + hlen:
        raise FormatError(len(buf), f"header needs {hlen} bytes, file ends early")
    try:
        header = json.loads(buf[_PREFIX:_PREFIX + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(_PREFIX, f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(_PREFIX, "header must be a JSON object")
    base = _PREFIX + hlen
    payload = len(buf) - base
    meta = header.pop(META_KEY, {})
    tensors = {}
    end = 0
    for name, info in header.items():
        try:
            shape = tuple(int(s) for s in info["shape"])
            off = int(info["offset"])
            dtype = info["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(_PREFIX, f"malformed entry for {name!r}") from exc
        if dtype != "f32":
            raise FormatError(_PREFIX, f"unsupported dtype {dtype!r} for {name!r}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if off < 0 or off + nbytes > payload:
            raise FormatError(base + min(max(off, 0), payload), f"tensor {name!r} runs past the end of the payload")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=base + off) \
            .astype(np.float64).reshape(shape)
        end = max(end, off + nbytes)
    if end != payload:
        raise FormatError(base + end, f"{payload - end} unexpected trailing payload bytes")
    return Checkpoint(tensors, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
