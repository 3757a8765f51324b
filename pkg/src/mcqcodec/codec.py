"""Image-level compression pipeline and model spec files.

A model spec is a small ``key = value`` text file::

    name = desk-m2
    transform = patchify-dct
    patch = 4
    channels = 3
    levels = 3
    groups = 2
    ks = 256, 64, 16
    codebook = desk-m2.mcqb

``codebook`` is resolved relative to the spec file (relative to the working
directory for the built-in presets).  ``offset`` and ``scale``
(comma-separated, one per channel) are optional.
"""

import os
import struct
from dataclasses import dataclass
from importlib import resources
from typing import List, Optional

import numpy as np

from .cascade import CascadeConfig, decode_cascade, encode_cascade, upsample_to
from .container import StreamHeader, read_stream, write_stream
from .entropy import build_tables, decode_indices, encode_indices
from .quantizer import MultiCodebook, SamplerConfig
from .transform import TransformSpec, analysis, crop, pad_to_multiple, synthesis

PRESET_NAMES = ("desk-m2", "desk-m6", "desk-m9", "desk-m12", "desk-m16")


@dataclass
class ModelSpec:
    name: str
    transform: TransformSpec
    levels: int
    groups: int
    ks: List[int]
    codebook: Optional[str] = None

    def __post_init__(self):
        if len(self.ks) != self.levels:
            raise ValueError(f"{self.name}: {len(self.ks)} codebook sizes for {self.levels} levels")
        if self.latent_channels % self.groups:
            raise ValueError(f"{self.name}: N={self.latent_channels} not divisible by M={self.groups}")

    @property
    def latent_channels(self) -> int:
        return self.transform.latent_channels

    @property
    def unit(self) -> int:
        """Image dims are padded to a multiple of this so every level halves evenly."""
        return self.transform.patch * 2 ** (self.levels - 1)

    def check_books(self, books: MultiCodebook):
        if books.levels != self.levels or books.ks != list(self.ks) \
                or books.groups != self.groups or books.channels != self.latent_channels:
            raise ValueError(
                f"codebook (L={books.levels}, M={books.groups}, K={books.ks}, N={books.channels}) "
                f"does not match spec {self.name}"
            )

    def to_text(self) -> str:
        t = self.transform
        lines = [
            f"name = {self.name}",
            f"transform = {t.kind}",
            f"patch = {t.patch}",
            f"channels = {t.channels}",
            f"offset = {', '.join(repr(v) for v in t.offset)}",
            f"scale = {', '.join(repr(v) for v in t.scale)}",
            f"levels = {self.levels}",
            f"groups = {self.groups}",
            f"ks = {', '.join(str(k) for k in self.ks)}",
        ]
        if self.codebook:
            lines.append(f"codebook = {self.codebook}")
        return "\n".join(lines) + "\n"


def parse_spec(text: str, base_dir: Optional[str] = None) -> ModelSpec:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    missing = {"name", "patch", "levels", "groups", "ks"} - set(values)
    if missing:
        raise ValueError(f"spec is missing {sorted(missing)}")

    def floats(key):
        return tuple(float(v) for v in values[key].split(",")) if key in values else ()

    transform = TransformSpec(
        kind=values.get("transform", "patchify-dct"),
        patch=int(values["patch"]),
        channels=int(values.get("channels", 3)),
        offset=floats("offset"),
        scale=floats("scale"),
    )
    codebook = values.get("codebook")
    if codebook and base_dir and not os.path.isabs(codebook):
        codebook = os.path.join(base_dir, codebook)
    return ModelSpec(
        name=values["name"],
        transform=transform,
        levels=int(values["levels"]),
        groups=int(values["groups"]),
        ks=[int(v) for v in values["ks"].split(",")],
        codebook=codebook,
    )


def load_spec(path) -> ModelSpec:
    with open(path) as fh:
        return parse_spec(fh.read(), os.path.dirname(os.path.abspath(path)))


def load_preset(name: str) -> ModelSpec:
    text = resources.files("mcqcodec").joinpath("presets", f"{name}.cfg").read_text()
    return parse_spec(text)


def image_to_latent(image: np.ndarray, spec: ModelSpec):
    padded, dims = pad_to_multiple(image, spec.unit)
    return analysis(padded, spec.transform), dims


def compress(image: np.ndarray, spec: ModelSpec, books: MultiCodebook,
             sampler: Optional[SamplerConfig] = None) -> bytes:
    """Encode an 8-bit image to an ``.mcq`` stream.

    Hard (greedy) assignment unless a gumbel ``sampler`` is given, in which
    case the header's sampling flag is set.
    """
    spec.check_books(books)
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    latent, (height, width) = image_to_latent(image, spec)
    sampler = sampler or SamplerConfig()
    cfg = CascadeConfig(spec.levels, list(spec.ks), spec.groups, sampler)
    codes, _, _ = encode_cascade(latent, books, cfg)
    return encode_codes(codes, spec, books, width, height, sampler.mode == "gumbel")


def encode_codes(codes, spec: ModelSpec, books: MultiCodebook, width: int, height: int,
                 sampled: bool = False) -> bytes:
    tables = build_tables(codes, spec.ks)
    header = StreamHeader(width, height, spec.transform, list(spec.ks), spec.groups,
                          books.digest(), sampled, tables)
    return write_stream(header, encode_indices(codes, tables))


def decode_codes(stream: bytes, books: MultiCodebook):
    """Parse and entropy-decode a stream; returns ``(header, codes)``."""
    header, payload = read_stream(stream, expected_digest=books.digest())
    codes = decode_indices(payload, header.tables, header.level_shapes())
    return header, codes


def spec_from_header(header: StreamHeader, name: str = "stream") -> ModelSpec:
    return ModelSpec(name, header.transform, header.levels, header.groups, list(header.ks))


def reconstruct(header: StreamHeader, codes, books: MultiCodebook, start_level: int = 0) -> np.ndarray:
    latent = decode_cascade(codes, books, start=start_level)
    if start_level:
        latent = upsample_to(latent, codes[0].shape[-3:-1])
    image = synthesis(latent, header.transform)
    return crop(image, (header.height, header.width))


def decompress(stream: bytes, books: MultiCodebook, start_level: int = 0) -> np.ndarray:
    """Decode an ``.mcq`` stream; ``start_level > 0`` drops that many finest levels."""
    header, codes = decode_codes(stream, books)
    return reconstruct(header, codes, books, start_level)


LATENT_MAGIC = b"MCQL"


def latents_to_bytes(grids: np.ndarray) -> bytes:
    """Raw latent dump: ``MCQL``, u32 count, h, w, n, then float32 values (little-endian)."""
    grids = np.asarray(grids)
    if grids.ndim != 4:
        raise ValueError("latent dump needs a (count, h, w, n) array")
    head = LATENT_MAGIC + struct.pack("<4I", *grids.shape)
    return head + np.ascontiguousarray(grids, dtype="<f4").tobytes()


def latents_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 20 or data[:4] != LATENT_MAGIC:
        raise ValueError("not an MCQL latent dump")
    shape = struct.unpack_from("<4I", data, 4)
    size = int(np.prod(shape))
    if len(data) != 20 + 4 * size:
        raise ValueError("latent dump length does not match its header")
    grids = np.frombuffer(data, dtype="<f4", offset=20).reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(grids)):
        raise ValueError("latent dump holds non-finite values")
    return grids
