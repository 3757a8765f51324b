"""Experiment drivers behind the CLI: R-D sweeps, code perturbation, latency scaling."""

import csv
import gc
import io
import math
import os
import tempfile
import time
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import metrics
from .codec import ModelSpec, compress, decode_codes, decompress, encode_codes, reconstruct, spec_from_header
from .container import actual_bpp, read_stream
from .entropy import coded_stream_bits
from .quantizer import MultiCodebook
from .transform import TransformSpec

SCHEMA = "mcq-1"


def atomic_write(path, data) -> None:
    """Write via a temp file in the target directory and rename, so no partial file survives."""
    if isinstance(data, str):
        data = data.encode()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".mcq-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rows_to_csv(rows: List[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def jackknife_se(values: Sequence[float]) -> float:
    """Jackknife standard error of the mean from the leave-one-out means."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n < 2:
        return 0.0
    loo = (x.sum() - x) / (n - 1)
    return float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


SWEEP_COLUMNS = ("schema", "model_id", "image", "bpp", "psnr_db", "msssim", "msssim_db",
                 "msssim_scales", "bpp_se", "psnr_db_se", "msssim_db_se")


def evaluate(image: np.ndarray, spec: ModelSpec, books: MultiCodebook) -> dict:
    stream = compress(image, spec, books)
    recon = decompress(stream, books)
    h, w = image.shape[:2]
    ms = metrics.ms_ssim(image, recon)
    return {
        "bpp": actual_bpp(stream, w, h),
        "psnr_db": metrics.psnr(image, recon),
        "msssim": ms,
        "msssim_db": metrics.db_convert(ms),
        "msssim_scales": metrics.msssim_scales(h, w),
    }


def sweep(images: Dict[str, np.ndarray], models: Iterable) -> List[dict]:
    """One row per (image, model) and a per-model mean row with jackknife standard errors.

    ``models`` yields ``(spec, books)`` pairs.
    """
    rows = []
    for spec, books in models:
        model_rows = []
        for name, image in images.items():
            row = {"schema": SCHEMA, "model_id": spec.name, "image": name}
            row.update(evaluate(image, spec, books))
            model_rows.append(row)
        mean = {"schema": SCHEMA, "model_id": spec.name, "image": "mean"}
        for key in ("bpp", "psnr_db", "msssim", "msssim_db"):
            vals = [r[key] for r in model_rows]
            mean[key] = float(np.mean(vals))
            if key != "msssim":
                mean[key + "_se"] = jackknife_se(vals)
        mean["msssim_scales"] = min(r["msssim_scales"] for r in model_rows)
        rows.extend(model_rows)
        rows.append(mean)
    return rows


def perturb_codes(codes: List[np.ndarray], ks: Sequence[int], fraction: float,
                  rng: np.random.Generator) -> List[np.ndarray]:
    """Replace ``floor(fraction * total)`` uniformly chosen codes by a different uniform index."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    sizes = [b.size for b in codes]
    total = sum(sizes)
    chosen = rng.choice(total, size=int(math.floor(fraction * total)), replace=False)
    out = [np.array(b, copy=True) for b in codes]
    bounds = np.cumsum([0] + sizes)
    for level, b in enumerate(out):
        k = ks[level]
        local = chosen[(chosen >= bounds[level]) & (chosen < bounds[level + 1])] - bounds[level]
        if k == 1 or local.size == 0:
            continue
        flat = b.reshape(-1)
        local = np.sort(local)
        flat[local] = (flat[local] + rng.integers(1, k, size=local.size)) % k
    return out


def perturb_stream(stream: bytes, books: MultiCodebook, fraction: float, seed: int = 0,
                   reference: Optional[np.ndarray] = None):
    """Perturb a stream's codes and re-encode with fresh tables.

    Distortion is measured against ``reference`` (the clean decode if omitted).
    Returns ``(new_stream, report)``.
    """
    header, codes = decode_codes(stream, books)
    spec = spec_from_header(header)
    rng = np.random.default_rng(seed)
    new_codes = perturb_codes(codes, header.ks, fraction, rng)
    new_stream = encode_codes(new_codes, spec, books, header.width, header.height, header.sampled)
    clean = reconstruct(header, codes, books)
    dirty = reconstruct(header, new_codes, books)
    ref = clean if reference is None else reference
    w, h = header.width, header.height
    streams = header.levels * header.groups
    before_payload = coded_stream_bits(read_stream(stream)[1], streams)
    after_payload = coded_stream_bits(read_stream(new_stream)[1], streams)
    report = {
        "schema": SCHEMA,
        "fraction": fraction,
        "seed": seed,
        "changed": int(sum(int(np.sum(a != b)) for a, b in zip(codes, new_codes))),
        "bpp_before": actual_bpp(stream, w, h),
        "bpp_after": actual_bpp(new_stream, w, h),
        "payload_bpp_before": before_payload / (w * h),
        "payload_bpp_after": after_payload / (w * h),
        "mse_before": float(np.mean((ref.astype(float) - clean) ** 2)),
        "mse_after": float(np.mean((ref.astype(float) - dirty) ** 2)),
        "psnr_before": metrics.psnr(ref, clean),
        "psnr_after": metrics.psnr(ref, dirty),
    }
    if metrics.msssim_scales(h, w):
        report["msssim_before"] = metrics.ms_ssim(ref, clean)
        report["msssim_after"] = metrics.ms_ssim(ref, dirty)
    report["delta_bpp"] = report["bpp_after"] - report["bpp_before"]
    return new_stream, report


BENCH_COLUMNS = ("schema", "M", "K", "enc_ms", "dec_ms")


def _interleaved_medians(fns: Sequence, repeats: int, warmup: int) -> List[float]:
    """Median wall-clock ms per callable.

    Repeats run round-robin over all callables, so slow drift in machine load
    spreads evenly across configs instead of biasing whichever ran last.
    """
    for fn in fns:
        for _ in range(warmup):
            fn()
    times = [[] for _ in fns]
    gc.collect()
    enabled = gc.isenabled()
    gc.disable()  # keep collector pauses out of the samples
    try:
        for _ in range(repeats):
            for fn, bucket in zip(fns, times):
                t0 = time.perf_counter()
                fn()
                bucket.append((time.perf_counter() - t0) * 1e3)
    finally:
        if enabled:
            gc.enable()
    return [float(np.median(t)) for t in times]


def bench_latency(ms: Sequence[int], ks: Sequence[int], image: np.ndarray,
                  transform: Optional[TransformSpec] = None, repeats: int = 20,
                  warmup: int = 3, seed: int = 0) -> List[dict]:
    """Median encode (quantize + entropy) and decode (entropy + lookup) latency per (M, K).

    Single-level models with random codebooks; timing does not depend on training.
    """
    if warmup < 3 or repeats < 20:
        raise ValueError("need warmup >= 3 and repeats >= 20")
    transform = transform or TransformSpec("patchify", 4, image.shape[2])
    n = transform.latent_channels
    rng = np.random.default_rng(seed)
    configs = []
    for m in ms:
        for k in ks:
            spec = ModelSpec(f"bench-m{m}-k{k}", transform, 1, m, [k])
            books = MultiCodebook([rng.normal(0, 0.3, (m, k, n // m))])
            configs.append((m, k, spec, books, compress(image, spec, books)))
    enc = _interleaved_medians(
        [lambda spec=spec, books=books: compress(image, spec, books)
         for _, _, spec, books, _ in configs], repeats, warmup)
    dec = _interleaved_medians(
        [lambda stream=stream, books=books: decompress(stream, books)
         for _, _, _, books, stream in configs], repeats, warmup)
    return [{"schema": SCHEMA, "M": m, "K": k, "enc_ms": e, "dec_ms": d}
            for (m, k, _, _, _), e, d in zip(configs, enc, dec)]


def linear_fit(x: Sequence[float], y: Sequence[float]):
    """Least-squares line; returns ``(slope, intercept, r_squared)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)
