"""``mcq``: train codebooks, compress/decompress images, and run the R-D,
perturbation and latency studies.

Machine-readable outputs (CSV/JSON) carry a ``schema`` field.  Every output
file is written to a temp file and renamed, so failures leave nothing behind.
Exit codes: 0 success, 1 usage or data error, 2 training divergence.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import metrics
from .codec import (PRESET_NAMES, ModelSpec, compress, decode_codes, decompress, image_to_latent,
                    latents_from_bytes, load_preset, load_spec, reconstruct)
from .container import StreamError, actual_bpp, level_factors, read_stream, sup_bpp
from .images import read_image, synthetic_image, write_image
from .quantizer import MultiCodebook, SamplerConfig
from .studies import (BENCH_COLUMNS, SCHEMA, SWEEP_COLUMNS, atomic_write, bench_latency, linear_fit,
                      perturb_stream, rows_to_csv, sweep)
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger("mcqcodec")

IMAGE_EXTS = (".ppm", ".pgm", ".pnm", ".png")
TRACE_COLUMNS = ("schema", "epoch", "loss", "temperature", "lr")
KMEANS_TRACE_COLUMNS = ("schema", "level", "group", "iteration", "inertia")


class CliError(Exception):
    pass


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _resolve_spec(value) -> ModelSpec:
    if os.path.isfile(value):
        return load_spec(value)
    if value in PRESET_NAMES:
        return load_preset(value)
    raise CliError(f"no spec file or preset named {value!r} (presets: {', '.join(PRESET_NAMES)})")


def _load_books(args, spec=None) -> MultiCodebook:
    path = args.codebook or (spec.codebook if spec else None)
    if not path:
        raise CliError("no codebook given (use --codebook or a spec with 'codebook = ...')")
    try:
        return MultiCodebook.load(path)
    except OSError as exc:
        raise CliError(f"cannot read codebook {path}: {exc.strerror}") from exc


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}") from exc


def _image_files(directory):
    if not os.path.isdir(directory):
        raise CliError(f"{directory} is not a directory")
    return sorted(os.path.join(directory, f) for f in os.listdir(directory)
                  if f.lower().endswith(IMAGE_EXTS))


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        atomic_write(path, text)
    else:
        sys.stdout.write(text)


def load_corpus(path, spec: ModelSpec):
    """Latent grids from an MCQL dump or a directory of images (transformed with ``spec``)."""
    if os.path.isfile(path):
        grids = latents_from_bytes(_read_bytes(path))
        if grids.shape[-1] != spec.latent_channels:
            raise CliError(f"latent dump has n={grids.shape[-1]}, spec expects {spec.latent_channels}")
        return list(grids)
    grids = []
    for f in _image_files(path):
        image = read_image(f)
        grids.append(image_to_latent(image, spec)[0])
    if not grids:
        raise CliError(f"corpus {path} holds no images")
    return grids


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    spec = _resolve_spec(args.spec)
    out = args.out or spec.codebook
    if not out:
        raise CliError("train needs --out or a spec naming its codebook")
    corpus = load_corpus(args.corpus, spec)
    cfg = TrainConfig(levels=spec.levels, groups=spec.groups, ks=list(spec.ks),
                      algorithm=args.algorithm, epochs=args.epochs, batch_size=args.batch_size,
                      lr_initial=args.lr[0], lr_final=args.lr[1],
                      temp_initial=args.temperature[0], temp_final=args.temperature[1],
                      seed=args.seed, init=args.init)
    result = train(corpus, cfg)
    atomic_write(out, result.books.to_bytes())
    trace_path = args.trace or os.path.splitext(out)[0] + ".loss.csv"
    columns = TRACE_COLUMNS if args.algorithm == "gumbel-st" else KMEANS_TRACE_COLUMNS
    atomic_write(trace_path, rows_to_csv([dict(r, schema=SCHEMA) for r in result.trace], columns))
    log.info("wrote %s and %s", out, trace_path)
    if result.flagged:
        log.warning("%d duplicate codewords were perturbed", len(result.flagged))
    return 0


def cmd_compress(args):
    spec = _resolve_spec(args.spec)
    books = _load_books(args, spec)
    image = read_image(args.image)
    sampler = None
    if args.sample:
        sampler = SamplerConfig(temperature=args.temperature, seed=args.seed, mode="gumbel")
    stream = compress(image, spec, books, sampler)
    out = args.out or os.path.splitext(args.image)[0] + ".mcq"
    atomic_write(out, stream)
    if args.report is not None:
        h, w = image.shape[:2]
        recon = decompress(stream, books)
        report = {"schema": SCHEMA, "model_id": spec.name, "image": args.image, "bytes": len(stream),
                  "bpp": actual_bpp(stream, w, h), "psnr_db": metrics.psnr(image, recon),
                  "sup_bpp": sup_bpp(spec.groups, [float(np.log2(k)) for k in spec.ks],
                                     level_factors(spec.transform.patch, spec.levels))}
        if metrics.msssim_scales(h, w):
            report["msssim"] = metrics.ms_ssim(image, recon)
            report["msssim_db"] = metrics.db_convert(report["msssim"])
            report["msssim_scales"] = metrics.msssim_scales(h, w)
        _write_json(args.report or None, report)
    return 0


def cmd_decompress(args):
    books = _load_books(args)
    stream = _read_bytes(args.stream)
    header, codes = decode_codes(stream, books)
    start = 0
    if args.levels_decode is not None:
        if not 1 <= args.levels_decode <= header.levels:
            raise CliError(f"--levels-decode must lie in 1..{header.levels}")
        start = header.levels - args.levels_decode
    image = reconstruct(header, codes, books, start)
    out = args.out or os.path.splitext(args.stream)[0] + ".ppm"
    ext = os.path.splitext(out)[1] or ".ppm"
    tmp = out + ".partial" + ext
    try:
        write_image(tmp, image)
        os.replace(tmp, out)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return 0


def cmd_sweep(args):
    files = _image_files(args.images)
    if not files:
        raise CliError(f"{args.images} holds no images")
    images = {os.path.basename(f): read_image(f) for f in files}
    models = []
    for value in args.spec:
        spec = _resolve_spec(value)
        models.append((spec, _load_books(argparse.Namespace(codebook=None), spec)))
    rows = sweep(images, models)
    text = rows_to_csv(rows, SWEEP_COLUMNS)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_perturb(args):
    books = _load_books(args)
    stream = _read_bytes(args.stream)
    reference = read_image(args.reference) if args.reference else None
    new_stream, report = perturb_stream(stream, books, args.fraction, args.seed, reference)
    out = args.out or os.path.splitext(args.stream)[0] + ".perturbed.mcq"
    atomic_write(out, new_stream)
    report["stream"] = out
    _write_json(args.report, report)
    return 0


def cmd_bench(args):
    if args.image:
        image = read_image(args.image)
    else:
        image = synthetic_image(np.random.default_rng(args.seed), args.size, args.size, 3)
    rows = bench_latency(_ints(args.ms), _ints(args.ks), image, repeats=args.repeats,
                         warmup=args.warmup, seed=args.seed)
    text = rows_to_csv(rows, BENCH_COLUMNS)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    for m in sorted({r["M"] for r in rows}):
        sub = [r for r in rows if r["M"] == m]
        if len(sub) >= 2:
            ks = [r["K"] for r in sub]
            enc = linear_fit(ks, [r["enc_ms"] for r in sub])
            dec = linear_fit(ks, [r["dec_ms"] for r in sub])
            mean_dec = float(np.mean([r["dec_ms"] for r in sub]))
            log.info("M=%d encoder slope %.4g ms/K (R^2 %.3f); decoder |slope|*Kmax/mean %.3f",
                     m, enc[0], enc[2], abs(dec[0]) * max(ks) / mean_dec)
    return 0


def cmd_inspect(args):
    stream = _read_bytes(args.stream)
    header, payload = read_stream(stream)
    t = header.transform
    info = {
        "schema": SCHEMA,
        "version": header.version,
        "width": header.width,
        "height": header.height,
        "channels": t.channels,
        "transform": {"kind": t.kind, "patch": t.patch, "offset": list(t.offset),
                      "scale": list(t.scale)},
        "levels": header.levels,
        "groups": header.groups,
        "ks": header.ks,
        "level_shapes": [list(s) for s in header.level_shapes()],
        "codebook_sha256": header.digest.hex(),
        "sampled": header.sampled,
        "bytes": len(stream),
        "payload_bytes": len(payload),
        "bpp": actual_bpp(stream, header.width, header.height),
    }
    _write_json(args.out, info)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP worker threads (1 = bit-reproducible)")
    common.add_argument("--out", default=None)

    parser = argparse.ArgumentParser(prog="mcq", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="learn a codebook from a corpus")
    p.add_argument("corpus", help="image directory or MCQL latent dump")
    p.add_argument("--spec", required=True, help="spec file or preset name")
    p.add_argument("--algorithm", choices=("gumbel-st", "kmeans"), default="gumbel-st")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, nargs=2, default=(0.5, 0.005), metavar=("INITIAL", "FINAL"))
    p.add_argument("--temperature", type=float, nargs=2, default=(1.0, 0.1),
                   metavar=("INITIAL", "FINAL"))
    p.add_argument("--init", choices=("kmeans++", "random-sample"), default="kmeans++")
    p.add_argument("--trace", default=None, help="loss CSV (default: next to the codebook)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", parents=[common], help="image -> .mcq stream")
    p.add_argument("image")
    p.add_argument("--spec", required=True)
    p.add_argument("--codebook", default=None)
    p.add_argument("--sample", action="store_true", help="gumbel sampling instead of greedy codes")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--report", nargs="?", const="", default=None,
                   help="print (or write to the given path) a JSON bpp/PSNR/MS-SSIM report")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", parents=[common], help=".mcq stream -> image")
    p.add_argument("stream")
    p.add_argument("--codebook", required=True)
    p.add_argument("--levels-decode", type=int, default=None,
                   help="decode only the N coarsest levels (progressive truncation)")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("sweep", parents=[common], help="R-D CSV over images x models")
    p.add_argument("images", help="image directory")
    p.add_argument("--spec", nargs="+", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("perturb", parents=[common], help="randomly change a fraction of codes")
    p.add_argument("stream")
    p.add_argument("--codebook", required=True)
    p.add_argument("--fraction", type=float, default=0.15)
    p.add_argument("--reference", default=None, help="original image for distortion figures")
    p.add_argument("--report", default=None, help="JSON report path (default: stdout)")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("bench", parents=[common], help="encode/decode latency versus K")
    p.add_argument("--ms", default="2")
    p.add_argument("--ks", default="64,128,256,512,1024,2048,4096,8192")
    p.add_argument("--image", default=None, help="benchmark image (default: synthetic)")
    p.add_argument("--size", type=int, default=256, help="side of the synthetic image")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", parents=[common], help="dump a stream header as JSON")
    p.add_argument("stream")
    p.set_defaults(func=cmd_inspect)
    return parser


def _thread_limit(threads):
    if threads is None:
        return nullcontext()
    if threads < 1:
        raise CliError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MCQ_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except TrainingDiverged as exc:
        print(f"mcq: training diverged: {exc}", file=sys.stderr)
        return 2
    except (CliError, StreamError, ValueError, OSError) as exc:
        print(f"mcq: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
