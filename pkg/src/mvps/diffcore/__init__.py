from .codec import AreaLatentCodec, BlockDCTCodec, decode_latent, encode_latent, make_codec
from .dropout import DropoutPolicy, apply_modality_dropout, draw_dropout
from .sampling import ddim_loop, guided_eps
from .schedule import NoiseSchedule, ScheduleConfig
from .text import TextEmbedder
from .unet import (
    INJECTION_BLOCKS,
    ControlBranch,
    DenoiserConfig,
    UNet,
    base_unet_forward,
    controlled_forward,
)

__all__ = [
    "AreaLatentCodec", "BlockDCTCodec", "decode_latent", "encode_latent", "make_codec",
    "DropoutPolicy", "apply_modality_dropout", "draw_dropout", "ddim_loop", "guided_eps",
    "NoiseSchedule", "ScheduleConfig", "TextEmbedder", "INJECTION_BLOCKS", "ControlBranch",
    "DenoiserConfig", "UNet", "base_unet_forward", "controlled_forward",
]
