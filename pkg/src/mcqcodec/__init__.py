"""Multi-codebook vector quantization codec with cascaded residual levels.

Pipeline: fixed patch transform -> L-level residual vector quantization with
M sub-codebooks per level -> range coding of the indices with per-image
frequency tables.
"""

from .cascade import CascadeConfig, decode_cascade, encode_cascade, reconstruction_error
from .codec import ModelSpec, compress, decompress, load_preset, load_spec, parse_spec
from .container import StreamHeader, actual_bpp, read_stream, sup_bpp, write_stream
from .entropy import FrequencyTable, build_tables, decode_indices, encode_indices, estimate_rate_bits
from .metrics import bd_rate, db_convert, ms_ssim, psnr
from .quantizer import (MultiCodebook, SamplerConfig, dequantize, pairwise_sq_distances,
                        quantize_hard, quantize_stochastic)
from .trainer import GmmSpec, TrainConfig, TrainingDiverged, sample_gmm, train
from .transform import TransformSpec, analysis, downsample, synthesis, upsample

__version__ = "0.1.0"

__all__ = [
    "CascadeConfig", "FrequencyTable", "GmmSpec", "ModelSpec", "MultiCodebook", "SamplerConfig",
    "StreamHeader", "TrainConfig", "TrainingDiverged", "TransformSpec", "actual_bpp", "analysis",
    "bd_rate", "build_tables", "compress", "db_convert", "decode_cascade", "decode_indices",
    "decompress", "dequantize", "downsample", "encode_cascade", "encode_indices",
    "estimate_rate_bits", "load_preset", "load_spec", "ms_ssim", "pairwise_sq_distances",
    "parse_spec", "psnr", "quantize_hard", "quantize_stochastic", "read_stream",
    "reconstruction_error", "sample_gmm", "sup_bpp", "synthesis", "train", "upsample",
    "write_stream",
]
