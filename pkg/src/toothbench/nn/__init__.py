"""Forward-only residual attention U-Net at toy scale."""

from .attention import VARIANTS, attention_forward, init_attention
from .model import (
    ModelConfig,
    db_forward,
    init_model,
    init_reb,
    load_params,
    model_forward,
    output_hash,
    reb_forward,
    save_params,
)
from .ops import conv3d, instance_norm, kaiming_init, maxpool3d, relu, sigmoid, upsample3d

__all__ = [
    "VARIANTS", "ModelConfig", "attention_forward", "conv3d", "db_forward", "init_attention", "init_model",
    "init_reb", "instance_norm", "kaiming_init", "load_params", "maxpool3d", "model_forward", "output_hash",
    "reb_forward", "relu", "save_params", "sigmoid", "upsample3d",
]
