"""Named-tensor checkpoints and their binary file format.

Layout (all integers little-endian)::

    b"FTLB"  u32 version  u32 entry_count
    entry_count x { u16 name_len, name (utf-8), u8 rank, rank x u32 dim,
                    prod(dims) x f64 }
    u32 meta_len  meta (utf-8 JSON text)

Nothing may follow the metadata block.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"FTLB"
VERSION = 1


class Checkpoint:
    """Ordered ``{name: float64 array}`` plus a JSON-serialisable metadata dict."""

    def __init__(self, tensors, meta=None):
        self.tensors = {name: np.asarray(arr, dtype=np.float64) for name, arr in tensors.items()}
        self.meta = dict(meta or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def copy(self):
        return Checkpoint({k: v.copy() for k, v in self.tensors.items()}, json.loads(json.dumps(self.meta)))

    def num_layers(self):
        if "encoder" in self.meta:
            return int(self.meta["encoder"]["num_layers"])
        layers = {int(m.group(1)) for m in map(re.compile(r"^layer\.(\d+)\.").match, self.tensors) if m}
        return max(layers) + 1 if layers else 0

    def bit_equal(self, other) -> bool:
        """Same names in the same order, same dims, identical payload bytes."""
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )

    def __eq__(self, other):
        return isinstance(other, Checkpoint) and self.bit_equal(other) and self.meta == other.meta

    def __repr__(self):
        return f"Checkpoint({len(self.tensors)} tensors, meta keys={sorted(self.meta)})"


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} has too many dims")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    (count,) = r.unpack("<I", "entry count")
    tensors = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start + 2) from None
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(8 * size, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata block is not valid UTF-8 JSON: {exc}", meta_at) from None
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} unexpected trailing bytes", r.pos)
    return Checkpoint(tensors, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
