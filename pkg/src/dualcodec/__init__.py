"""Dual-latent collaborative decoding image codec.

A scalar-quantized fidelity expert and a vector-quantized perception expert
share one dual-stream bitstream; trainable decoder-side enhancement and
gated cross-expert modulation modules produce fidelity-anchored and
perception-anchored reconstructions from the same bytes.
"""

from .bitstream import (CodecBundle, decode_image, encode_image, pack,
                        unpack, bits_per_pixel)
from .collab import CollaborativeDecoder, ModeConfig, ablation_variant
from .errors import (ArtifactMissingError, ConfigError, ContractError,
                     DualCodecError, FormatError)
from .metrics import (BDResult, RDCurve, bd_metric, bd_rate, latent_histogram,
                      perceptual_proxy, psnr)
from .sq import FactorizedPrior, SqConfig, SqModel, rate_estimate, scalar_quantize
from .training import LossWeights, total_loss, train_mode
from .vq import VqConfig, VqModel, codebook_quantize, straight_through, token_rate

__version__ = "0.1.0"

__all__ = [
    "ArtifactMissingError", "BDResult", "CodecBundle", "CollaborativeDecoder",
    "ConfigError", "ContractError", "DualCodecError", "FactorizedPrior",
    "FormatError", "LossWeights", "ModeConfig", "RDCurve", "SqConfig",
    "SqModel", "VqConfig", "VqModel", "ablation_variant", "bd_metric",
    "bd_rate", "bits_per_pixel", "codebook_quantize", "decode_image",
    "encode_image", "latent_histogram", "pack", "perceptual_proxy", "psnr",
    "rate_estimate", "scalar_quantize", "straight_through", "token_rate",
    "total_loss", "train_mode", "unpack",
]
