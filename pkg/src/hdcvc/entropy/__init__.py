from .bitstream import Bitstream, BitstreamError, FrameRecord, I_FRAME, P_FRAME
from .models import (
    PMF_FLOOR,
    SCALE_FLOOR,
    EntropyError,
    FactorizedPrior,
    GaussianConditional,
    Hyperprior,
    estimate_bits,
    gaussian_likelihood,
    likelihood,
)
from .quantize import NOISE, ROUND, quantize, round_half_away
from .rangecoder import CoderError, pmf_to_cdf, range_decode, range_encode

__all__ = [
    "Bitstream",
    "BitstreamError",
    "CoderError",
    "EntropyError",
    "FactorizedPrior",
    "FrameRecord",
    "GaussianConditional",
    "Hyperprior",
    "I_FRAME",
    "NOISE",
    "PMF_FLOOR",
    "P_FRAME",
    "ROUND",
    "SCALE_FLOOR",
    "estimate_bits",
    "gaussian_likelihood",
    "likelihood",
    "pmf_to_cdf",
    "quantize",
    "range_decode",
    "range_encode",
    "round_half_away",
]
