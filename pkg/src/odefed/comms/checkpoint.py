"""Versioned little-endian parameter container.

Layout (all integers little-endian)::

    b"FODE"  u32 version  32-byte config digest  u32 entry count
    per entry: u16 name length, UTF-8 name, u8 rank, rank x u32 extents, u64 offset
    raw float32 data for every entry, back to back, in entry order

Offsets are absolute byte positions in the file. There is no checksum: a
flipped payload byte decodes to a different value rather than an error.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..models import ModelConfig
from ..paramset import ParameterSet

MAGIC = b"FODE"
VERSION = 1
DIGEST_BYTES = 32
_FLOAT = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def config_digest(config: ModelConfig) -> bytes:
    """SHA-256 of the canonical JSON of the shape-determining config fields."""
    canonical = json.dumps(config.shape_key(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).digest()


def header_size(params: ParameterSet) -> int:
    size = 4 + 4 + DIGEST_BYTES + 4
    for name, t in params.items():
        size += 2 + len(name.encode("utf-8")) + 1 + 4 * len(t.shape) + 8
    return size


def serialized_size(params: ParameterSet) -> int:
    return header_size(params) + 4 * params.numel()


def serialize_params(params: ParameterSet, config: ModelConfig) -> bytes:
    head = [MAGIC, struct.pack("<I", VERSION), config_digest(config), struct.pack("<I", len(params))]
    offset = header_size(params)
    blobs = []
    for name, t in params.items():
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)))
        head.append(raw)
        head.append(struct.pack("<B", len(t.shape)))
        head.append(struct.pack(f"<{len(t.shape)}I", *t.shape))
        head.append(struct.pack("<Q", offset))
        blob = np.ascontiguousarray(t.data, dtype=_FLOAT).tobytes()
        blobs.append(blob)
        offset += len(blob)
    return b"".join(head + blobs)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize_params(buf: bytes) -> tuple[ParameterSet, bytes]:
    """Decode a container into ``(params, config_digest)``."""
    r = _Reader(memoryview(buf).tobytes() if not isinstance(buf, bytes) else buf)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a parameter container (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported format version {version} (expected {VERSION})")
    digest = r.take(DIGEST_BYTES, "config digest")
    (count,) = r.unpack("<I", "entry count")
    entries = []
    for i in range(count):
        (nlen,) = r.unpack("<H", f"entry {i} name length")
        name = r.take(nlen, f"entry {i} name").decode("utf-8")
        (rank,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{rank}I", f"{name} extents")
        (offset,) = r.unpack("<Q", f"{name} offset")
        entries.append((name, shape, offset))
    expected = r.pos
    items = []
    for name, shape, offset in entries:
        if offset != expected:
            raise CheckpointError(f"entry {name!r} at offset {offset}, expected {expected}")
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * n
        if end > len(r.buf):
            raise TruncatedError(f"payload for {name!r} ends at {end} but container has {len(r.buf)} bytes")
        arr = np.frombuffer(r.buf, dtype=_FLOAT, count=n, offset=offset).reshape(shape)
        items.append((name, arr.astype(np.float32)))
        expected = end
    if expected != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - expected} trailing bytes after payload")
    return ParameterSet.from_arrays(items), digest


def load_params(buf: bytes, config: ModelConfig) -> ParameterSet:
    """Decode and insist the container was written for a shape-compatible config."""
    params, digest = deserialize_params(buf)
    if digest != config_digest(config):
        raise DigestMismatchError("config digest mismatch: parameters were written for a different model shape")
    return params


def save_checkpoint(path: str | os.PathLike, params: ParameterSet, config: ModelConfig) -> int:
    data = serialize_params(params, config)
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path: str | os.PathLike, config: ModelConfig) -> ParameterSet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_params(path.read_bytes(), config)
