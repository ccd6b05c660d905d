"""Bit-exact packing of code-index frames into a transmittable stream.

Layout: a fixed 26-byte header followed by the payload. Indices are packed
big-endian (MSB first), frame-major then head-major, ceil(log2 K) bits per
index, zero-padded to a byte boundary at the end of the stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

MAGIC = b"AVSC"
VERSION = 1
_HEADER = struct.Struct(">4sBIHBHI8s")
FILE_EXTENSION = ".avsc"


@dataclass
class StreamMeta:
    """Header fields carried alongside the packed frames."""

    sample_rate_hz: int = 16000
    hop_size: int = 256
    heads: int = 4
    entries_per_head: int = 256
    speaker_tag: bytes = b""
    version: int = VERSION

    def __post_init__(self):
        if isinstance(self.speaker_tag, str):
            self.speaker_tag = self.speaker_tag.encode("utf-8")
        if len(self.speaker_tag) > 8:
            raise ValueError("speaker_tag longer than 8 bytes")

    @property
    def bits_per_index(self) -> int:
        return bits_per_index(self.entries_per_head)


def bits_per_index(entries_per_head: int) -> int:
    """ceil(log2 K): bits needed to address one codebook entry."""
    if entries_per_head < 1:
        raise ValueError("entries_per_head must be >= 1")
    return max(0, (entries_per_head - 1).bit_length())


def bitrate_bps(meta: StreamMeta) -> Fraction:
    """Exact payload bitrate: frame_rate * heads * bits_per_index."""
    return Fraction(meta.sample_rate_hz, meta.hop_size) * meta.heads * meta.bits_per_index


def pack(indices: np.ndarray, meta: StreamMeta) -> bytes:
    """Serialize a (frames, heads) index array into a bitstream."""
    arr = np.asarray(indices)
    if arr.ndim != 2:
        raise ValueError(f"indices must be 2-D (frames, heads), got shape {arr.shape}")
    if arr.shape[1] != meta.heads:
        raise ValueError(f"expected {meta.heads} heads, got {arr.shape[1]}")
    if arr.size and (arr.min() < 0 or arr.max() >= meta.entries_per_head):
        raise ValueError("index out of range for the configured codebook size")
    frame_count = arr.shape[0]
    header = _HEADER.pack(
        MAGIC,
        meta.version,
        meta.sample_rate_hz,
        meta.hop_size,
        meta.heads,
        meta.entries_per_head,
        frame_count,
        meta.speaker_tag.ljust(8, b"\x00"),
    )
    bits = meta.bits_per_index
    if bits == 0 or frame_count == 0:
        return header
    flat = arr.astype(np.uint32).ravel()
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint32)
    bitmat = ((flat[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    payload = np.packbits(bitmat.ravel())
    return header + payload.tobytes()


def unpack(data: bytes) -> tuple[np.ndarray, StreamMeta]:
    """Parse a bitstream back into ((frames, heads) indices, meta). Bit-exact inverse of pack."""
    if len(data) < _HEADER.size:
        raise ValueError("truncated header")
    magic, version, rate, hop, heads, entries, frame_count, tag = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"unsupported stream version {version}")
    meta = StreamMeta(
        sample_rate_hz=rate,
        hop_size=hop,
        heads=heads,
        entries_per_head=entries,
        speaker_tag=tag.rstrip(b"\x00"),
        version=version,
    )
    bits = meta.bits_per_index
    total_bits = frame_count * heads * bits
    expected = _HEADER.size + (total_bits + 7) // 8
    if len(data) < expected:
        raise ValueError(f"truncated payload: have {len(data)} bytes, need {expected}")
    if len(data) > expected:
        raise ValueError(f"oversized payload: have {len(data)} bytes, expected {expected}")
    if bits == 0 or frame_count == 0:
        return np.zeros((frame_count, heads), dtype=np.int64), meta
    raw = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    flat_bits = np.unpackbits(raw)[:total_bits]
    bitmat = flat_bits.reshape(frame_count * heads, bits).astype(np.int64)
    weights = 1 << np.arange(bits - 1, -1, -1, dtype=np.int64)
    indices = (bitmat * weights).sum(axis=1).reshape(frame_count, heads)
    return indices, meta


def write_stream(path, indices: np.ndarray, meta: StreamMeta) -> None:
    with open(path, "wb") as fh:
        fh.write(pack(indices, meta))


def read_stream(path) -> tuple[np.ndarray, StreamMeta]:
    with open(path, "rb") as fh:
        return unpack(fh.read())
