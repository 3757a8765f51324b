"""Fixed invertible image <-> latent transforms and inter-level resampling.

Images are ``uint8`` arrays shaped ``(height, width, channels)``.  Latent grids
are float arrays shaped ``(..., h, w, n)``; every resampling operator here acts
on the two axes in front of the channel axis so a leading batch axis is free.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.fft import dctn, idctn

KINDS = ("patchify", "patchify-dct")


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "patchify-dct"
    patch: int = 4
    channels: int = 3
    offset: Tuple[float, ...] = field(default=())
    scale: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.patch < 1:
            raise ValueError("patch size must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        # defaults map [0, 255] onto [-1, 1)
        if not self.offset:
            object.__setattr__(self, "offset", (128.0,) * self.channels)
        if not self.scale:
            object.__setattr__(self, "scale", (128.0,) * self.channels)
        object.__setattr__(self, "offset", tuple(float(v) for v in self.offset))
        object.__setattr__(self, "scale", tuple(float(v) for v in self.scale))
        if len(self.offset) != self.channels or len(self.scale) != self.channels:
            raise ValueError("normalization needs one offset/scale per channel")
        if min(self.scale) <= 0:
            raise ValueError("normalization scale must be strictly positive")

    @property
    def latent_channels(self) -> int:
        return self.patch * self.patch * self.channels


def _as_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {image.shape}")
    return image


def analysis(image: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Map an image to its ``(H/p, W/p, p*p*C)`` latent grid.

    Each latent vector is the normalized patch flattened in (row, col, channel)
    order; ``patchify-dct`` first applies an orthonormal 2-D DCT-II to every
    patch, channel by channel.
    """
    image = _as_image(image)
    height, width, channels = image.shape
    p = spec.patch
    if height == 0 or width == 0:
        raise ValueError("zero-sized image")
    if channels != spec.channels:
        raise ValueError(f"image has {channels} channels, spec expects {spec.channels}")
    if height % p or width % p:
        raise ValueError(
            f"image {height}x{width} not divisible by patch {p}; pad_to_multiple first"
        )
    x = (image.astype(np.float64) - np.asarray(spec.offset)) / np.asarray(spec.scale)
    # (h, p, w, p, C) -> (h, w, p, p, C)
    patches = x.reshape(height // p, p, width // p, p, channels).transpose(0, 2, 1, 3, 4)
    if spec.kind == "patchify-dct":
        patches = dctn(patches, type=2, axes=(2, 3), norm="ortho")
    return np.ascontiguousarray(patches.reshape(height // p, width // p, spec.latent_channels))


def synthesis(grid: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Inverse of :func:`analysis`, rounded half away from zero and clamped to 8 bits."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ValueError(f"latent grid must be (h, w, n), got shape {grid.shape}")
    h, w, n = grid.shape
    if n != spec.latent_channels:
        raise ValueError(f"grid has {n} channels, spec expects {spec.latent_channels}")
    p, channels = spec.patch, spec.channels
    patches = grid.reshape(h, w, p, p, channels)
    if spec.kind == "patchify-dct":
        patches = idctn(patches, type=2, axes=(2, 3), norm="ortho")
    x = patches.transpose(0, 2, 1, 3, 4).reshape(h * p, w * p, channels)
    x = x * np.asarray(spec.scale) + np.asarray(spec.offset)
    return quantize_8bit(x)


def quantize_8bit(x: np.ndarray) -> np.ndarray:
    rounded = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


def _pad_even(grid: np.ndarray) -> np.ndarray:
    h, w = grid.shape[-3], grid.shape[-2]
    if h % 2 == 0 and w % 2 == 0:
        return grid
    pad = [(0, 0)] * grid.ndim
    pad[-3] = (0, h % 2)
    pad[-2] = (0, w % 2)
    return np.pad(grid, pad, mode="edge")


def downsample(grid: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd sizes are edge-replicated first (output is ceil(h/2))."""
    grid = _pad_even(np.asarray(grid, dtype=np.float64))
    *lead, h, w, n = grid.shape
    blocks = grid.reshape(*lead, h // 2, 2, w // 2, 2, n)
    return blocks.mean(axis=(-4, -2))


def upsample(grid: np.ndarray, shape: Tuple[int, int] = None) -> np.ndarray:
    """Nearest-neighbour 2x replication, optionally cropped to ``shape`` = (h, w)."""
    grid = np.asarray(grid)
    out = np.repeat(np.repeat(grid, 2, axis=-3), 2, axis=-2)
    if shape is not None:
        out = out[..., : shape[0], : shape[1], :]
    return out


def upsample_adjoint(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Adjoint of ``upsample(., crop)``: sum each 2x2 block back onto its source cell."""
    grad = np.asarray(grad)
    h, w = shape
    pad = [(0, 0)] * grad.ndim
    pad[-3] = (0, 2 * h - grad.shape[-3])
    pad[-2] = (0, 2 * w - grad.shape[-2])
    grad = np.pad(grad, pad)
    *lead, _, _, n = grad.shape
    return grad.reshape(*lead, h, 2, w, 2, n).sum(axis=(-4, -2))


def downsample_adjoint(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`downsample` for an input of spatial size ``shape``.

    Edge-replicated rows/columns fold their share back onto the last real row/column.
    """
    h, w = shape
    spread = np.repeat(np.repeat(np.asarray(grad) / 4.0, 2, axis=-3), 2, axis=-2)
    if h % 2:
        spread[..., h - 1, :, :] += spread[..., h, :, :]
    if w % 2:
        spread[..., :, w - 1, :] += spread[..., :, w, :]
    return spread[..., :h, :w, :]


def level_shapes(h: int, w: int, levels: int):
    """Spatial size of every cascade level, halving with ceil."""
    shapes = [(h, w)]
    for _ in range(levels - 1):
        h, w = -(-h // 2), -(-w // 2)
        shapes.append((h, w))
    return shapes


def pad_to_multiple(image: np.ndarray, multiple: int):
    """Edge-pad right/bottom so both dims divide ``multiple``; returns (padded, (H, W))."""
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    image = _as_image(image)
    height, width = image.shape[:2]
    ph = -height % multiple
    pw = -width % multiple
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return image, (height, width)


def crop(image: np.ndarray, dims: Tuple[int, int]) -> np.ndarray:
    return image[: dims[0], : dims[1]]
