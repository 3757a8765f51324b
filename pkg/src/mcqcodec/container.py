"""The ``.mcq`` stream format and bits-per-pixel accounting.

Byte layout (all integers little-endian, fixed width) is documented in
``docs/FORMAT.md``.  Codebooks never travel in the stream; a SHA-256 digest of
the MCQB codebook bytes does.
"""

import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .entropy import FrequencyTable, MAX_TOTAL
from .transform import KINDS, TransformSpec, level_shapes

MAGIC = b"MCQ1"
VERSION = 1

FLAG_SAMPLED = 0x01


class StreamError(ValueError):
    """Base class for every recoverable stream decoding failure."""


class CorruptMagic(StreamError):
    pass


class UnsupportedVersion(StreamError):
    pass


class DigestMismatch(StreamError):
    pass


class Truncated(StreamError):
    pass


@dataclass
class StreamHeader:
    width: int
    height: int
    transform: TransformSpec
    ks: List[int]
    groups: int
    digest: bytes
    sampled: bool = False
    tables: List[List[FrequencyTable]] = field(default_factory=list)
    version: int = VERSION

    @property
    def channels(self) -> int:
        return self.transform.channels

    @property
    def levels(self) -> int:
        return len(self.ks)

    def padded_dims(self) -> Tuple[int, int]:
        """Image dims after padding to a multiple of the coarsest level's footprint."""
        unit = self.transform.patch * 2 ** (self.levels - 1)
        return -(-self.height // unit) * unit, -(-self.width // unit) * unit

    def level_shapes(self) -> List[Tuple[int, int]]:
        h, w = self.padded_dims()
        p = self.transform.patch
        return level_shapes(h // p, w // p, self.levels)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise Truncated(f"stream truncated at byte {self.pos} (needed {size} more)")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"stream truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def header_to_bytes(header: StreamHeader) -> bytes:
    t = header.transform
    parts = [
        MAGIC,
        struct.pack("<BIIB", header.version, header.width, header.height, t.channels),
        struct.pack("<BB", KINDS.index(t.kind), t.patch),
        struct.pack(f"<{t.channels}d", *t.offset),
        struct.pack(f"<{t.channels}d", *t.scale),
        struct.pack("<BH", header.levels, header.groups),
        struct.pack(f"<{header.levels}I", *header.ks),
    ]
    if len(header.digest) != 32:
        raise ValueError("codebook digest must be 32 bytes")
    parts.append(bytes(header.digest))
    parts.append(struct.pack("<B", FLAG_SAMPLED if header.sampled else 0))
    if len(header.tables) != header.levels:
        raise ValueError("need one row of frequency tables per level")
    for k, row in zip(header.ks, header.tables):
        if len(row) != header.groups:
            raise ValueError("need one frequency table per group")
        for table in row:
            if table.size != k:
                raise ValueError("frequency table size differs from K")
            parts.append(table.counts.astype("<u4").tobytes())
    return b"".join(parts)


def write_stream(header: StreamHeader, payload: bytes) -> bytes:
    return header_to_bytes(header) + payload


def read_stream(data: bytes, expected_digest: Optional[bytes] = None):
    """Parse a ``.mcq`` stream into ``(header, payload)``.

    Validates magic, version, digest (when ``expected_digest`` is given) and the
    payload framing; every failure raises a :class:`StreamError` subclass.
    """
    data = bytes(data)
    if len(data) < 4:
        raise Truncated("stream shorter than its magic")
    if data[:4] != MAGIC:
        raise CorruptMagic(f"bad magic {data[:4]!r}")
    rd = _Reader(data)
    rd.pos = 4
    version, width, height, channels = rd.take("<BIIB")
    if version != VERSION:
        raise UnsupportedVersion(f"stream version {version} not supported")
    kind_index, patch = rd.take("<BB")
    if kind_index >= len(KINDS) or channels not in (1, 3) or patch < 1:
        raise StreamError("invalid transform description")
    offset = rd.take(f"<{channels}d")
    scale = rd.take(f"<{channels}d")
    try:
        transform = TransformSpec(KINDS[kind_index], patch, channels, offset, scale)
    except ValueError as exc:
        raise StreamError(str(exc)) from exc
    levels, groups = rd.take("<BH")
    if levels < 1 or groups < 1:
        raise StreamError("stream declares no levels or groups")
    ks = list(rd.take(f"<{levels}I"))
    if min(ks) < 1:
        raise StreamError("codebook size 0 in header")
    digest = rd.raw(32)
    if expected_digest is not None and digest != bytes(expected_digest):
        raise DigestMismatch("stream was encoded with a different codebook")
    (flags,) = rd.take("<B")
    tables = []
    for k in ks:
        row = []
        for _ in range(groups):
            counts = np.frombuffer(rd.raw(4 * k), dtype="<u4").astype(np.int64)
            if counts.min() < 1 or counts.sum() > MAX_TOTAL:
                raise StreamError("invalid frequency table")
            row.append(FrequencyTable(counts))
        tables.append(row)
    header = StreamHeader(width, height, transform, ks, groups, digest,
                          bool(flags & FLAG_SAMPLED), tables, version)
    payload = data[rd.pos:]
    _check_framing(payload, levels * groups)
    return header, payload


def _check_framing(payload: bytes, stream_count: int):
    pos = 0
    for _ in range(stream_count):
        if pos + 4 > len(payload):
            raise Truncated("payload ends inside a length field")
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4 + n
        if pos > len(payload):
            raise Truncated("payload ends inside a coded stream")
    if pos != len(payload):
        raise StreamError("trailing bytes after payload")


def sup_bpp(groups: int, bits: Sequence[float], factors: Sequence[float]) -> float:
    """Upper bound on bits per pixel: ``M * sum(bits_l / factor_l**2)``.

    ``factors`` are the per-level spatial reduction factors between image
    pixels and code positions.
    """
    if len(bits) != len(factors):
        raise ValueError("bits and factors must have equal length")
    if any(f < 1 for f in factors):
        raise ValueError("spatial factors must be >= 1")
    return groups * sum(b / (f * f) for b, f in zip(bits, factors))


def sup_bpp_for_shapes(groups: int, ks: Sequence[int], shapes: Sequence[Tuple[int, int]],
                       width: int, height: int) -> float:
    """Same bound from the actual per-level code grid sizes (covers padded images)."""
    if len(ks) != len(shapes):
        raise ValueError("ks and shapes must have equal length")
    bits = sum(math.log2(k) * h * w for k, (h, w) in zip(ks, shapes))
    return groups * bits / (width * height)


def level_factors(patch: int, levels: int) -> List[int]:
    return [patch * 2 ** level for level in range(levels)]


def actual_bpp(stream: bytes, width: int, height: int) -> float:
    if width <= 0 or height <= 0:
        raise ValueError("dims must be positive")
    return 8.0 * len(stream) / (width * height)
