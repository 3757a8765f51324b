"""Static-table range coding of code stacks.

The coder is the classic 32-bit carry-propagating range coder (low kept in a
33-bit accumulator, range renormalized a byte at a time once it drops below
2**24).  Only integer arithmetic appears inside the coding loops, so payloads
are byte-identical on every platform.

The first byte such a coder shifts out is always zero (the coded interval
never leaves [0, 2**32)), so it is not written and the decoder primes its code
register with an implicit zero instead.
"""

import bisect
import math
import struct
from typing import List, Sequence, Tuple

import numpy as np

TOP = 1 << 24
MASK32 = (1 << 32) - 1
# a table total above the smallest renormalized range would leave range // total == 0
MAX_TOTAL = TOP


class TruncatedPayload(ValueError):
    pass


class FrequencyTable:
    """Add-one-smoothed symbol counts with a cumulative lookup."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size < 1:
            raise ValueError("counts must be a non-empty vector")
        if counts.min() < 1:
            raise ValueError("every count must be >= 1")
        total = int(counts.sum())
        if total > MAX_TOTAL:
            raise ValueError(f"table total {total} exceeds coder precision {MAX_TOTAL}")
        self.counts = counts
        self.total = total
        self.cum = np.concatenate([[0], np.cumsum(counts)])
        self._freq_list = counts.tolist()
        self._cum_list = self.cum.tolist()
        self._buckets = None

    def bucket_index(self):
        """``(shift, starts)`` narrowing the symbol search for a decoder value.

        The value range is cut into about K buckets of width ``2**shift``;
        ``starts[b]`` is the symbol holding the first value of bucket ``b``, so
        a value in bucket ``b`` decodes to a symbol in ``[starts[b], starts[b+1]]``.
        """
        if self._buckets is None:
            k = self.counts.size
            shift = max(0, (self.total - 1).bit_length() - (k - 1).bit_length())
            edges = np.arange(((self.total - 1) >> shift) + 2, dtype=np.int64) << shift
            starts = np.searchsorted(self.cum, np.minimum(edges, self.total - 1), side="right") - 1
            self._buckets = (shift, starts.tolist())
        return self._buckets

    @property
    def size(self) -> int:
        return self.counts.size

    def __eq__(self, other):
        return isinstance(other, FrequencyTable) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"FrequencyTable(K={self.size}, total={self.total})"

    def cost_bits(self, symbols: np.ndarray) -> float:
        symbols = np.asarray(symbols).ravel()
        if symbols.size == 0:
            return 0.0
        hist = np.bincount(symbols, minlength=self.size)
        return float(np.sum(hist * (math.log2(self.total) - np.log2(self.counts))))


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.pending = 0  # 0xFF bytes waiting on a possible carry
        self.started = False
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            if self.started:
                self.out.append((self.cache + carry) & 0xFF)
            self.started = True
            self.out.extend(bytes([(0xFF + carry) & 0xFF]) * self.pending)
            self.pending = 0
            self.cache = (self.low >> 24) & 0xFF
        else:
            self.pending += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, cum: int, freq: int, total: int):
        r = self.range // total
        self.low += r * cum
        if cum + freq < total:
            self.range = r * freq
        else:
            # last symbol absorbs the division remainder
            self.range -= r * cum
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedPayload("range-coded stream ended early")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, table: FrequencyTable) -> int:
        total = table.total
        r = self.range // total
        value = min(self.code // r, total - 1)
        cum_list = table._cum_list
        symbol = bisect.bisect_right(cum_list, value) - 1
        cum = cum_list[symbol]
        self.code -= r * cum
        if symbol + 1 < table.size:
            self.range = r * table._freq_list[symbol]
        else:
            self.range -= r * cum
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next()) & MASK32
        return symbol

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.data)


def encode_symbols(symbols: Sequence[int], table: FrequencyTable) -> bytes:
    enc = RangeEncoder()
    cum, freq, total = table._cum_list, table._freq_list, table.total
    k = table.size
    for s in np.asarray(symbols).ravel().tolist():
        if not 0 <= s < k:
            raise ValueError(f"symbol {s} outside table of size {k}")
        enc.encode(cum[s], freq[s], total)
    return enc.finish()


def decode_symbols(data: bytes, table: FrequencyTable, count: int) -> np.ndarray:
    """Decode ``count`` symbols; same arithmetic as ``RangeDecoder`` with the loop inlined."""
    n = len(data)
    if n < 4:
        raise TruncatedPayload("range-coded stream ended early")
    code = int.from_bytes(data[:4], "big")
    pos = 4
    rng = MASK32
    total = table.total
    cum_list, freq_list = table._cum_list, table._freq_list
    last = table.size - 1
    shift, starts = table.bucket_index()
    bisect_right = bisect.bisect_right
    out = [0] * count
    try:
        for i in range(count):
            r = rng // total
            value = code // r
            if value >= total:
                value = total - 1
            b = value >> shift
            symbol = bisect_right(cum_list, value, starts[b], starts[b + 1] + 1) - 1
            cum = cum_list[symbol]
            code -= r * cum
            rng = r * freq_list[symbol] if symbol < last else rng - r * cum
            while rng < TOP:
                rng <<= 8
                code = ((code << 8) | data[pos]) & MASK32
                pos += 1
            out[i] = symbol
    except IndexError:
        raise TruncatedPayload("range-coded stream ended early") from None
    if pos != n:
        raise ValueError("range-coded stream has unconsumed bytes (table or shape mismatch)")
    return np.asarray(out, dtype=np.int64)


def _streams(codes: Sequence[np.ndarray]):
    """Yield ``(level, group, symbols)`` in the fixed (level, group) order."""
    for level, b in enumerate(codes):
        b = np.asarray(b)
        for m in range(b.shape[-1]):
            yield level, m, b[..., m]


def build_tables(codes: Sequence[np.ndarray], ks: Sequence[int]) -> List[List[FrequencyTable]]:
    """``tables[level][group]``: histogram of the stream plus one for every symbol."""
    tables = []
    for b, k in zip(codes, ks):
        b = np.asarray(b)
        if b.size and (b.min() < 0 or b.max() >= k):
            raise ValueError(f"code index out of range for K={k}")
        tables.append([
            FrequencyTable(np.bincount(b[..., m].ravel(), minlength=k) + 1)
            for m in range(b.shape[-1])
        ])
    return tables


def encode_indices(codes: Sequence[np.ndarray], tables) -> bytes:
    """Payload: for each (level, group), a little-endian u32 length then the coded bytes."""
    out = []
    for level, m, symbols in _streams(codes):
        data = encode_symbols(symbols, tables[level][m])
        out.append(struct.pack("<I", len(data)))
        out.append(data)
    return b"".join(out)


def split_payload(payload: bytes, stream_count: int) -> List[bytes]:
    chunks, pos = [], 0
    for _ in range(stream_count):
        if pos + 4 > len(payload):
            raise TruncatedPayload("payload ends inside a length field")
        (n,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        if pos + n > len(payload):
            raise TruncatedPayload("payload ends inside a coded stream")
        chunks.append(payload[pos:pos + n])
        pos += n
    if pos != len(payload):
        raise ValueError("trailing bytes after the last coded stream")
    return chunks


def decode_indices(payload: bytes, tables, shapes: Sequence[Tuple[int, int]]) -> List[np.ndarray]:
    """Inverse of :func:`encode_indices`; ``shapes`` are the per-level (h, w)."""
    groups = len(tables[0])
    chunks = iter(split_payload(payload, len(shapes) * groups))
    codes = []
    for level, (h, w) in enumerate(shapes):
        level_codes = np.empty((h, w, groups), dtype=np.int64)
        for m in range(groups):
            level_codes[..., m] = decode_symbols(next(chunks), tables[level][m], h * w).reshape(h, w)
        codes.append(level_codes)
    return codes


def estimate_rate_bits(codes: Sequence[np.ndarray], tables) -> float:
    """Ideal cost ``sum -log2(count / total)`` of the stack under ``tables``."""
    return sum(tables[level][m].cost_bits(symbols) for level, m, symbols in _streams(codes))


def coded_stream_bits(payload: bytes, stream_count: int) -> int:
    """Bits of range-coded data in a payload, excluding its u32 length framing."""
    return 8 * sum(len(c) for c in split_payload(payload, stream_count))
