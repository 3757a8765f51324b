"""L-level residual cascade: quantize, subtract, downsample going in;
look up, upsample, add coming out."""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .quantizer import MultiCodebook, SamplerConfig, dequantize, quantize_hard, quantize_stochastic
from .transform import downsample, level_shapes, upsample


@dataclass
class CascadeConfig:
    levels: int
    ks: List[int]
    groups: int
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one level")
        if len(self.ks) != self.levels or min(self.ks) < 1:
            raise ValueError("one K >= 1 per level is required")

    @classmethod
    def for_books(cls, books: MultiCodebook, sampler: Optional[SamplerConfig] = None):
        return cls(books.levels, books.ks, books.groups, sampler or SamplerConfig())

    def check(self, books: MultiCodebook):
        if books.levels < self.levels or books.ks[: self.levels] != list(self.ks) \
                or books.groups != self.groups:
            raise ValueError("cascade config does not match the codebook")


def encode_cascade(latent: np.ndarray, books: MultiCodebook,
                   cfg: Optional[CascadeConfig] = None,
                   rng: Optional[np.random.Generator] = None):
    """Returns ``(codes, quantized, inputs)``: one entry per level for each list.

    ``inputs[l]`` is the level's input ``y^l`` so callers can measure per-level error.
    """
    cfg = cfg or CascadeConfig.for_books(books)
    cfg.check(books)
    y = np.asarray(latent, dtype=np.float64)
    stochastic = cfg.sampler.mode == "gumbel"
    if stochastic and rng is None:
        rng = np.random.default_rng(cfg.sampler.seed)
    codes, quantized, inputs = [], [], []
    for level in range(cfg.levels):
        table = books.level(level)
        if stochastic:
            q, b, _ = quantize_stochastic(y, table, cfg.sampler, rng=rng)
        else:
            q, b = quantize_hard(y, table)
        inputs.append(y)
        codes.append(b)
        quantized.append(q)
        if level + 1 < cfg.levels:
            y = downsample(y - q)
    return codes, quantized, inputs


def check_stack_shapes(codes: List[np.ndarray]):
    """Level l+1 must be ceil(level l / 2) on both spatial axes."""
    if not codes:
        raise ValueError("empty code stack")
    h, w = codes[0].shape[-3], codes[0].shape[-2]
    expected = level_shapes(h, w, len(codes))
    for level, (b, shape) in enumerate(zip(codes, expected)):
        if b.shape[-3:-1] != shape:
            raise ValueError(
                f"level {level + 1} has shape {b.shape[-3:-1]}, halving law requires {shape}"
            )


def decode_cascade(codes: List[np.ndarray], books: MultiCodebook, start: int = 0) -> np.ndarray:
    """Reconstruct the level-``start`` latent (0 = full resolution) from a code stack.

    Levels finer than ``start`` are skipped, which is how progressive truncation works.
    """
    check_stack_shapes(codes)
    if len(codes) > books.levels:
        raise ValueError("code stack has more levels than the codebook")
    if not 0 <= start < len(codes):
        raise ValueError(f"start level {start} outside 0..{len(codes) - 1}")
    recon = dequantize(codes[-1], books.level(len(codes) - 1))
    for level in range(len(codes) - 2, start - 1, -1):
        shape = codes[level].shape[-3:-1]
        recon = dequantize(codes[level], books.level(level)) + upsample(recon, shape)
    return recon


def upsample_to(grid: np.ndarray, shape) -> np.ndarray:
    """Repeatedly upsample ``grid`` until it covers ``shape`` (for truncated decodes)."""
    sizes = [tuple(shape)]
    while sizes[-1] != tuple(grid.shape[-3:-1]):
        h, w = sizes[-1]
        if h <= grid.shape[-3] and w <= grid.shape[-2]:
            raise ValueError("grid is not an ancestor of the requested shape")
        sizes.append((-(-h // 2), -(-w // 2)))
    for size in reversed(sizes[:-1]):
        grid = upsample(grid, size)
    return grid


def reconstruction_error(latent: np.ndarray, books: MultiCodebook,
                         cfg: Optional[CascadeConfig] = None) -> dict:
    """Squared-error report: ``levels[l] = ||y^l - q^l||^2`` and ``total = ||y - y~||^2``."""
    cfg = cfg or CascadeConfig.for_books(books)
    codes, quantized, inputs = encode_cascade(latent, books, cfg)
    per_level = [float(np.sum((y - q) ** 2)) for y, q in zip(inputs, quantized)]
    recon = decode_cascade(codes, books)
    total = float(np.sum((np.asarray(latent, dtype=np.float64) - recon) ** 2))
    return {"levels": per_level, "total": total}
