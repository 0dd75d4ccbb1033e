"""Dense array math, autodiff primitives, optimizer, gradient checker."""

from .engine import (
    Array,
    NumericsError,
    Tensor,
    as_tensor,
    assert_finite,
    constant,
    embedding,
    gelu,
    grad_enabled,
    matmul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    take_rows,
    tensor,
    tmean,
    transpose,
    tsum,
)
from .ops import (
    attention,
    conv3d,
    cross_entropy_mean,
    layernorm,
    layernorm_affine,
    softmax_xent,
    upsample_nearest3d,
)
from .optim import OptimizerConfig, ParamStore, adam_step, grad_check

__all__ = [
    "Array",
    "NumericsError",
    "OptimizerConfig",
    "ParamStore",
    "Tensor",
    "adam_step",
    "as_tensor",
    "assert_finite",
    "attention",
    "constant",
    "conv3d",
    "cross_entropy_mean",
    "embedding",
    "gelu",
    "grad_check",
    "grad_enabled",
    "layernorm",
    "layernorm_affine",
    "matmul",
    "no_grad",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "softmax_xent",
    "square",
    "take_rows",
    "tensor",
    "tmean",
    "transpose",
    "tsum",
    "upsample_nearest3d",
]
