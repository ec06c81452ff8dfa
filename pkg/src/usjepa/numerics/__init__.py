from .checkpoint import arrays_sha256, file_sha256, load_checkpoint, save_checkpoint
from .optim import AdamW, OptimizerConfig, adamw_step, ema_momentum_at
from .tensor import (
    Parameter,
    Tensor,
    backward,
    concat,
    gather_rows,
    gelu,
    l1,
    layer_norm,
    linear,
    matmul,
    no_grad,
    smooth_l1,
    softmax,
    swapaxes,
)

__all__ = [
    "AdamW",
    "OptimizerConfig",
    "Parameter",
    "Tensor",
    "adamw_step",
    "arrays_sha256",
    "backward",
    "concat",
    "ema_momentum_at",
    "file_sha256",
    "gather_rows",
    "gelu",
    "l1",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "matmul",
    "no_grad",
    "save_checkpoint",
    "smooth_l1",
    "softmax",
    "swapaxes",
]
