"""Binary checkpoint format.

Layout, all integers little-endian::

    b"NCAC"  u32 version
    u32 channels, u32 steps, u32 update_hidden, u32 classifier_hidden,
    u32 num_classes, f64 fire_rate
    10 x array: u32 name_len, name (utf-8), u32 rank, rank x u32 dim, float32 values
    8-byte checksum (BLAKE2b-64) of every preceding byte

Arrays appear in the fixed order ``k1 k2 W1 b1 W2 b2 W3 b3 W4 b4``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    CheckpointError,
    ShapeError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from .model import PARAM_NAMES, NcaConfig, NcaParams

MAGIC = b"NCAC"
VERSION = 1
CHECKSUM_BYTES = 8
_CONFIG = struct.Struct("<5Id")


def checksum(payload):
    return hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest()


def encode(params, config):
    params.check(config)
    parts = [MAGIC, struct.pack("<I", VERSION), _CONFIG.pack(
        config.channels, config.steps, config.update_hidden, config.classifier_hidden,
        config.num_classes, float(config.fire_rate))]
    for name in PARAM_NAMES:
        arr = np.asarray(getattr(params, name))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + checksum(body)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, size, what):
        if self.pos + size > len(self.data) - CHECKSUM_BYTES:
            raise TruncatedCheckpointError(f"checkpoint ends inside {what} (offset {self.pos})")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


@dataclass
class Checkpoint:
    config: NcaConfig
    params: NcaParams
    version: int = VERSION


def decode(data):
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagicError("not a checkpoint: magic bytes missing")
    if len(data) < len(MAGIC) + 4 + CHECKSUM_BYTES:
        raise TruncatedCheckpointError("checkpoint shorter than its fixed header")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    reader = _Reader(data)
    reader.pos = len(MAGIC) + 4
    fields = reader.unpack(_CONFIG.format, "config header")
    try:
        config = NcaConfig(*fields)
    except ShapeError as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from exc
    expected = config.param_shapes()
    arrays = {}
    for name in PARAM_NAMES:
        (length,) = reader.unpack("<I", f"name length of {name}")
        got = reader.take(length, f"name of {name}").decode("utf-8", errors="replace")
        if got != name:
            raise CheckpointError(f"expected array {name!r}, found {got!r}")
        (rank,) = reader.unpack("<I", f"rank of {name}")
        dims = reader.unpack(f"<{rank}I", f"dims of {name}")
        if tuple(dims) != expected[name]:
            raise CheckpointError(f"array {name} has shape {tuple(dims)}, config expects {expected[name]}")
        count = int(np.prod(dims, dtype=np.int64))
        raw = reader.take(4 * count, f"values of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if len(data) - CHECKSUM_BYTES != reader.pos:
        if len(data) - CHECKSUM_BYTES < reader.pos:
            raise TruncatedCheckpointError("checkpoint truncated")
        raise CheckpointError(f"{len(data) - CHECKSUM_BYTES - reader.pos} unexpected bytes before checksum")
    if checksum(data[:-CHECKSUM_BYTES]) != data[-CHECKSUM_BYTES:]:
        raise ChecksumError("checkpoint checksum mismatch")
    return Checkpoint(config, NcaParams.from_dict(arrays), version)


def save_checkpoint(params, config, path):
    Path(path).write_bytes(encode(params, config))


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(data)
