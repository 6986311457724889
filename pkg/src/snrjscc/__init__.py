"""SNR-adaptive deep joint source-channel coding for wireless image transmission."""

from snrjscc.channel import (
    ChannelOutput,
    DegenerateCodeError,
    LatentCode,
    PilotBlock,
    SnrEstimate,
    awgn,
    estimate_variance_from_pilots,
    make_pilots,
    normalize_power,
    pack_complex,
    perturb_snr_estimate,
    snr_to_variance,
    transmit_pilots,
    unpack_complex,
    variance_to_snr,
)
from snrjscc.model import (
    BaselineJSCC,
    LayerSpec,
    ModelConfig,
    SnrAdaptiveJSCC,
    build_model,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "BaselineJSCC",
    "ChannelOutput",
    "DegenerateCodeError",
    "LatentCode",
    "LayerSpec",
    "ModelConfig",
    "PilotBlock",
    "SnrAdaptiveJSCC",
    "SnrEstimate",
    "awgn",
    "build_model",
    "estimate_variance_from_pilots",
    "load_checkpoint",
    "make_pilots",
    "normalize_power",
    "pack_complex",
    "perturb_snr_estimate",
    "save_checkpoint",
    "snr_to_variance",
    "transmit_pilots",
    "unpack_complex",
    "variance_to_snr",
]
