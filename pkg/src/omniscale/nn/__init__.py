from .functional import (
    attention,
    attention_weights,
    avg_pool,
    conv2d,
    depth_to_space,
    embedding,
    group_norm,
    l1,
    linear,
    mse,
    silu,
    sinusoidal_encode,
    space_to_depth,
    upsample_nearest,
)
from .gradcheck import GradCheckReport, grad_check
from .optim import AdamW
from .params import ParamStore, init_conv, init_linear, init_norm
from .tensor import Tensor, as_tensor, concat, no_grad

__all__ = [
    "AdamW",
    "GradCheckReport",
    "ParamStore",
    "Tensor",
    "as_tensor",
    "attention",
    "attention_weights",
    "avg_pool",
    "concat",
    "conv2d",
    "depth_to_space",
    "embedding",
    "grad_check",
    "group_norm",
    "init_conv",
    "init_linear",
    "init_norm",
    "l1",
    "linear",
    "mse",
    "no_grad",
    "silu",
    "sinusoidal_encode",
    "space_to_depth",
    "upsample_nearest",
]
