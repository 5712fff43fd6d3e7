"""Packed bit streams and the PVQR on-disk/wire encoding.

A PVQR blob is::

    magic "PVQR" | version (1 byte) | stream tag (1 byte) |
    bit count (8 bytes little-endian) | packed bits, MSB first,
    final byte zero-padded

Stream tags: 0 = A (public), 1 = B (private output), 2 = C (sealed or
deleted).  Sidecar metadata travels in a separate ``key=value`` text file.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "BitStream",
    "TAG_A",
    "TAG_B",
    "TAG_C",
    "PVQR_MAGIC",
    "PVQR_VERSION",
    "encode_stream",
    "decode_stream",
    "write_stream_file",
    "read_stream_file",
    "write_sidecar",
    "read_sidecar",
    "stream_digest",
]

PVQR_MAGIC = b"PVQR"
PVQR_VERSION = 1
TAG_A, TAG_B, TAG_C = 0, 1, 2
_TAG_NAMES = {TAG_A: "A", TAG_B: "B", TAG_C: "C"}
_HEADER = struct.Struct("<4sBBQ")


class FormatError(ValueError):
    """Raised for malformed PVQR/PVQV blobs and sidecar files."""


@dataclass(frozen=True)
class BitStream:
    """Immutable bit sequence packed MSB-first into bytes.

    ``n_bits`` may be zero (an empty stream is representable; consumers
    that need a minimum length enforce it themselves).  Padding bits in
    the last byte must be zero.
    """

    data: bytes
    n_bits: int

    def __post_init__(self):
        if self.n_bits < 0:
            raise ValueError("n_bits must be >= 0")
        want = (self.n_bits + 7) // 8
        if len(self.data) != want:
            raise ValueError(f"expected {want} packed bytes for {self.n_bits} bits, got {len(self.data)}")
        pad = want * 8 - self.n_bits
        if pad and self.data and (self.data[-1] & ((1 << pad) - 1)):
            raise ValueError("padding bits in final byte must be zero")

    def __len__(self) -> int:
        return self.n_bits

    @classmethod
    def from_bits(cls, bits) -> "BitStream":
        """Pack an iterable/array of 0/1 values."""
        arr = np.ascontiguousarray(bits, dtype=np.uint8)
        if arr.ndim != 1:
            raise ValueError("bits must be 1-d")
        if arr.size and arr.max() > 1:
            raise ValueError("bit values must be 0 or 1")
        return cls(np.packbits(arr).tobytes(), int(arr.size))

    def bits(self) -> np.ndarray:
        """Unpacked uint8 array of length n_bits."""
        if self.n_bits == 0:
            return np.zeros(0, dtype=np.uint8)
        return np.unpackbits(np.frombuffer(self.data, dtype=np.uint8))[: self.n_bits]

    def ones_fraction(self) -> float:
        if self.n_bits == 0:
            return 0.0
        return float(self.bits().mean())


def stream_digest(stream: BitStream) -> bytes:
    """SHA-256 over (bit count, packed bytes); binds a verdict to exact bits."""
    h = hashlib.sha256()
    h.update(struct.pack("<Q", stream.n_bits))
    h.update(stream.data)
    return h.digest()


def encode_stream(tag: int, stream: BitStream) -> bytes:
    if tag not in _TAG_NAMES:
        raise ValueError(f"unknown stream tag {tag!r}")
    return _HEADER.pack(PVQR_MAGIC, PVQR_VERSION, tag, stream.n_bits) + stream.data


def decode_stream(blob: bytes) -> tuple[int, BitStream]:
    """Parse a PVQR blob to (tag, BitStream); raises FormatError on any defect."""
    if len(blob) < _HEADER.size:
        raise FormatError(f"blob too short for PVQR header ({len(blob)} bytes)")
    magic, version, tag, n_bits = _HEADER.unpack_from(blob)
    if magic != PVQR_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != PVQR_VERSION:
        raise FormatError(f"unsupported PVQR version {version}")
    if tag not in _TAG_NAMES:
        raise FormatError(f"unknown stream tag {tag}")
    payload = blob[_HEADER.size :]
    want = (n_bits + 7) // 8
    if len(payload) != want:
        raise FormatError(f"bit count {n_bits} needs {want} payload bytes, found {len(payload)}")
    try:
        stream = BitStream(payload, n_bits)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return tag, stream


def write_stream_file(path, tag: int, stream: BitStream) -> None:
    Path(path).write_bytes(encode_stream(tag, stream))


def read_stream_file(path) -> tuple[int, BitStream]:
    return decode_stream(Path(path).read_bytes())


def write_sidecar(path, values: dict) -> None:
    """Write metadata as sorted ``key=value`` lines."""
    lines = []
    for key in sorted(values):
        v = values[key]
        if "\n" in key or "=" in key:
            raise ValueError(f"bad sidecar key {key!r}")
        lines.append(f"{key}={v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_sidecar(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"sidecar line {ln} is not key=value: {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out
