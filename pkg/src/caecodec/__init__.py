"""Learned lossy image codec with a context-adaptive entropy model.

Analysis/synthesis transforms and a hyperprior produce quantized latents;
a masked-window distribution estimator conditions each latent's Gaussian
on already-decoded neighbors, and an integer arithmetic coder writes the
actual bits. Pure numpy/scipy; see the README for the pipeline tour.
"""

from .tensor import Tape, Tensor, ShapeError
from .transforms import PROFILES, init_weights, make_config
from .entropy import LatentGrid, quantize, rate_estimate
from .coder import ArithmeticDecoder, ArithmeticEncoder, CorruptStreamError, build_cdf
from .codec import StreamFormatError, benchmark_codec, decode_image, encode_image
from .trainer import TrainConfig, train
from .metrics import RDCurve, RDPoint, bd_rate, ms_ssim, ms_ssim_db, psnr
from .weights_io import load_weights, save_weights
from .image_io import read_ppm, write_ppm

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "ShapeError", "PROFILES", "init_weights", "make_config",
    "LatentGrid", "quantize", "rate_estimate", "ArithmeticDecoder",
    "ArithmeticEncoder", "CorruptStreamError", "build_cdf",
    "StreamFormatError", "benchmark_codec", "decode_image", "encode_image",
    "TrainConfig", "train", "RDCurve", "RDPoint", "bd_rate", "ms_ssim",
    "ms_ssim_db", "psnr", "load_weights", "save_weights", "read_ppm",
    "write_ppm", "__version__",
]
