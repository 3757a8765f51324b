"""Image file I/O (binary PPM/PGM natively, PNG through Pillow) and synthetic test images."""

import os
import re

import numpy as np


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"(P[56])\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+"
                 rb"(?:#[^\n]*\s+)*(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    magic, width, height, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit samples are supported")
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    pixels = np.frombuffer(data, dtype=np.uint8, count=size, offset=m.end())
    return pixels.reshape(height, width, channels).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 2:
        image = image[:, :, None]
    height, width, channels = image.shape
    magic = {1: b"P5", 3: b"P6"}[channels]
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, width, height))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_image(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".ppm", ".pgm", ".pnm"):
        return read_ppm(path)
    from PIL import Image  # optional dependency

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return arr[:, :, None] if arr.ndim == 2 else arr


def write_image(path, image: np.ndarray) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".ppm", ".pgm", ".pnm"):
        return write_ppm(path, image)
    from PIL import Image

    image = np.asarray(image, dtype=np.uint8)
    Image.fromarray(image[:, :, 0] if image.shape[2] == 1 else image).save(path)


def synthetic_image(rng: np.random.Generator, height: int, width: int, channels: int = 3) -> np.ndarray:
    """Piecewise-smooth test image: a colour gradient, a few discs and bars, mild noise."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.empty((height, width, channels))
    for c in range(channels):
        a, b, base = rng.uniform(-1, 1, 2) * 120, rng.uniform(-1, 1) * 60, rng.uniform(60, 190)
        img[..., c] = base + a[0] * xx / width + a[1] * yy / height + b * np.sin(xx / width * 6.28)
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(0.1, 0.35) * min(height, width)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[mask] = rng.uniform(0, 255, channels)
    for _ in range(rng.integers(1, 4)):
        y0 = int(rng.integers(0, height))
        img[y0:y0 + int(rng.integers(2, 8))] = rng.uniform(0, 255, channels)
    img += rng.normal(0, 4, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)
