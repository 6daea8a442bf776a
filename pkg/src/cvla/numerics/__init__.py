"""Tensor arithmetic with reverse-mode differentiation and counter-based RNG."""

from .rng import RngStream
from .tensor import (
    DTYPES,
    GradRecord,
    Tensor,
    active_record,
    add,
    backward,
    concat,
    conv2d,
    embed,
    gaussian,
    gelu,
    layernorm,
    linear,
    matmul,
    mean_pool2d,
    mul,
    neg,
    reshape,
    softmax,
    sub,
    swapaxes,
    take,
    tensor,
    tmean,
    tsum,
    zeros,
)

__all__ = [
    "DTYPES",
    "GradRecord",
    "RngStream",
    "Tensor",
    "active_record",
    "add",
    "backward",
    "concat",
    "conv2d",
    "embed",
    "gaussian",
    "gelu",
    "layernorm",
    "linear",
    "matmul",
    "mean_pool2d",
    "mul",
    "neg",
    "reshape",
    "softmax",
    "sub",
    "swapaxes",
    "take",
    "tensor",
    "tmean",
    "tsum",
    "zeros",
]
