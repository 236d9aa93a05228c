from .core import (
    Tensor,
    adaptive_rms_norm,
    concat,
    cross_entropy,
    default_dtype,
    embedding,
    log_softmax,
    masked_attention,
    mse,
    precision,
    rms_norm,
    set_default_dtype,
    softmax,
    stack,
    stop_gradient,
)
from .adam import AdamState, adam_step
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import ParamStore, sinusoidal_embedding
from .rng import SplitRng

__all__ = [
    "Tensor", "adaptive_rms_norm", "concat", "cross_entropy", "default_dtype",
    "embedding", "log_softmax", "masked_attention", "mse", "precision",
    "rms_norm", "set_default_dtype", "softmax", "stack", "stop_gradient",
    "AdamState", "adam_step", "load_checkpoint", "save_checkpoint",
    "ParamStore", "sinusoidal_embedding", "SplitRng",
]
