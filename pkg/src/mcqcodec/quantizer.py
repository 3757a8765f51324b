"""Multi-codebook storage and single-level vector quantization."""

import hashlib
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

CODEBOOK_MAGIC = b"MCQB"
CODEBOOK_VERSION = 1

# distance matrices are built in chunks of at most this many entries
_CHUNK_ENTRIES = 1 << 22


class MultiCodebook:
    """Per-level, per-group codeword tables.

    ``tables[l]`` has shape ``(M, K_l, d)``.  Entries are held as float32 so the
    in-memory book is exactly what the MCQB file stores and what its digest covers.
    """

    def __init__(self, tables: Sequence[np.ndarray]):
        if not tables:
            raise ValueError("a codebook needs at least one level")
        self.tables: List[np.ndarray] = []
        for t in tables:
            t = np.asarray(t, dtype=np.float32)
            if t.ndim != 3:
                raise ValueError("each level table must be (M, K, d)")
            if not np.all(np.isfinite(t)):
                raise ValueError("codebook entries must be finite")
            t = np.ascontiguousarray(t)
            t.flags.writeable = False
            self.tables.append(t)
        self._wide = [t.astype(np.float64) for t in self.tables]
        for t in self._wide:
            t.flags.writeable = False
        self._digest = None
        m, _, d = self.tables[0].shape
        for t in self.tables:
            if t.shape[0] != m or t.shape[2] != d:
                raise ValueError("all levels must share M and d")
            if t.shape[1] < 1 or d < 1:
                raise ValueError("K and d must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.tables)

    @property
    def groups(self) -> int:
        return self.tables[0].shape[0]

    @property
    def dim(self) -> int:
        return self.tables[0].shape[2]

    @property
    def ks(self) -> List[int]:
        return [t.shape[1] for t in self.tables]

    @property
    def channels(self) -> int:
        return self.groups * self.dim

    def parameter_count(self) -> int:
        return sum(k * self.groups * self.dim for k in self.ks)

    def level(self, index: int) -> np.ndarray:
        """Read-only float64 view of one level's ``(M, K, d)`` table."""
        return self._wide[index]

    def duplicates(self, tol: float = 1e-12):
        """List ``(level, group, k_a, k_b)`` for codeword pairs closer than ``tol``."""
        found = []
        for li, table in enumerate(self.tables):
            for m, book in enumerate(table.astype(np.float64)):
                dist = pairwise_sq_distances(book, book)
                a, b = np.nonzero(np.triu(dist <= tol * tol, k=1))
                found.extend((li, m, int(i), int(j)) for i, j in zip(a, b))
        return found

    def to_bytes(self) -> bytes:
        out = [CODEBOOK_MAGIC,
               struct.pack("<BBHH", CODEBOOK_VERSION, self.levels, self.groups, self.dim)]
        for t in self.tables:
            out.append(struct.pack("<I", t.shape[1]))
            out.append(t.astype("<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MultiCodebook":
        if len(data) < 10 or data[:4] != CODEBOOK_MAGIC:
            raise ValueError("not an MCQB codebook")
        version, levels, groups, dim = struct.unpack_from("<BBHH", data, 4)
        if version != CODEBOOK_VERSION:
            raise ValueError(f"unsupported codebook version {version}")
        pos = 10
        tables = []
        for _ in range(levels):
            if pos + 4 > len(data):
                raise ValueError("truncated codebook")
            (k,) = struct.unpack_from("<I", data, pos)
            pos += 4
            size = k * groups * dim * 4
            if pos + size > len(data):
                raise ValueError("truncated codebook")
            t = np.frombuffer(data, dtype="<f4", count=k * groups * dim, offset=pos)
            tables.append(t.reshape(groups, k, dim))
            pos += size
        if pos != len(data):
            raise ValueError("trailing bytes after codebook")
        return cls(tables)

    def digest(self) -> bytes:
        if self._digest is None:
            self._digest = hashlib.sha256(self.to_bytes()).digest()
        return self._digest

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MultiCodebook":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def truncated(self, levels: int) -> "MultiCodebook":
        return MultiCodebook(self.tables[:levels])


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    seed: int = 0
    mode: str = "hard"

    def __post_init__(self):
        if self.mode not in ("hard", "gumbel"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.mode == "gumbel" and not self.temperature > 0:
            raise ValueError("temperature must be > 0 in gumbel mode")


def pairwise_sq_distances(vectors: np.ndarray, table: np.ndarray) -> np.ndarray:
    """``||v_i - c_k||^2`` via ``v^2 + c^2 - 2 v.c``, clamped at zero.

    ``vectors`` is ``(..., d)`` and ``table`` is ``(K, d)``; result is ``(..., K)``.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or vectors.shape[-1] != table.shape[1]:
        raise ValueError(
            f"dimension mismatch: vectors {vectors.shape} vs table {table.shape}"
        )
    v2 = np.einsum("...d,...d->...", vectors, vectors)[..., None]
    c2 = np.einsum("kd,kd->k", table, table)
    dist = v2 + c2 - 2.0 * (vectors @ table.T)
    np.maximum(dist, 0.0, out=dist)
    return dist


def split_groups(grid: np.ndarray, groups: int) -> List[np.ndarray]:
    n = grid.shape[-1]
    if groups < 1 or n % groups:
        raise ValueError(f"{n} channels not divisible into {groups} groups")
    d = n // groups
    return [grid[..., m * d:(m + 1) * d] for m in range(groups)]


def merge_groups(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts, axis=-1)


def _check_books(grid: np.ndarray, books: np.ndarray):
    books = np.asarray(books, dtype=np.float64)
    if books.ndim != 3:
        raise ValueError("level books must be (M, K, d)")
    m, _, d = books.shape
    if grid.shape[-1] != m * d:
        raise ValueError(f"grid has {grid.shape[-1]} channels, books expect {m * d}")
    if not np.all(np.isfinite(grid)):
        raise ValueError("non-finite latent values")
    return books


def _argmin_chunked(vectors: np.ndarray, book: np.ndarray) -> np.ndarray:
    flat = vectors.reshape(-1, vectors.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    step = max(1, _CHUNK_ENTRIES // book.shape[0])
    for start in range(0, flat.shape[0], step):
        dist = pairwise_sq_distances(flat[start:start + step], book)
        out[start:start + step] = np.argmin(dist, axis=1)  # first minimum wins ties
    return out.reshape(vectors.shape[:-1])


def quantize_hard(grid: np.ndarray, books: np.ndarray):
    """Greedy nearest-codeword assignment per (position, group).

    Returns ``(quantized, codes)`` with ``codes`` shaped ``(..., h, w, M)``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    books = _check_books(grid, books)
    codes = np.stack(
        [_argmin_chunked(part, book) for part, book in zip(split_groups(grid, len(books)), books)],
        axis=-1,
    )
    return dequantize(codes, books), codes


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel samples ``-log(-log u)`` with ``u`` drawn from the open interval (0, 1)."""
    u = rng.random(shape)
    bad = u == 0.0
    while np.any(bad):
        u[bad] = rng.random(int(bad.sum()))
        bad = u == 0.0
    return -np.log(-np.log(u))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def quantize_stochastic(grid: np.ndarray, books: np.ndarray, cfg: SamplerConfig,
                        rng: Optional[np.random.Generator] = None):
    """Sample codewords from ``Categorical(softmax(-d^2 / tau))`` by the Gumbel-max trick.

    Returns ``(quantized, codes, probs)``; ``probs`` has shape ``(..., h, w, M, K)``
    and is the relaxation used for the straight-through backward pass.  Noise is
    drawn in (position, group, codeword) order from ``rng`` or ``default_rng(cfg.seed)``.
    """
    if cfg.mode != "gumbel":
        raise ValueError("quantize_stochastic needs a sampler in gumbel mode")
    tau = cfg.temperature
    grid = np.asarray(grid, dtype=np.float64)
    books = _check_books(grid, books)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    parts = split_groups(grid, len(books))
    logits = np.stack([-pairwise_sq_distances(p, b) for p, b in zip(parts, books)], axis=-2)
    scaled = logits / tau
    codes = np.argmax(scaled + gumbel_noise(rng, scaled.shape), axis=-1)
    return dequantize(codes, books), codes, softmax(scaled)


def dequantize(codes: np.ndarray, books: np.ndarray) -> np.ndarray:
    """Codeword lookup: ``codes`` ``(..., M)`` -> latent ``(..., M*d)``."""
    codes = np.asarray(codes)
    books = np.asarray(books, dtype=np.float64)
    m, k, d = books.shape
    if codes.shape[-1] != m:
        raise ValueError(f"codes carry {codes.shape[-1]} groups, books have {m}")
    if codes.size and (codes.min() < 0 or codes.max() >= k):
        raise ValueError(f"code index out of range for K={k}")
    gathered = books[np.arange(m), codes]  # (..., M, d)
    return gathered.reshape(*codes.shape[:-1], m * d)
