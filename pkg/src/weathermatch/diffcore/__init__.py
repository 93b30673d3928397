"""Differentiable numeric primitives: tape, ops, stores, optimizer, checks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .optim import AdamW
from .store import ParameterStore, ParamTensor
from .tape import (
    Var,
    absolute,
    add,
    attention_core,
    backward,
    check_finite,
    clip01,
    concat_channels,
    constant,
    depthwise_conv3x3,
    exp,
    gelu,
    layer_forward,
    layer_norm,
    leaf,
    matmul,
    mean_all,
    multiply,
    pointwise_conv,
    reshape,
    scale,
    slice0,
    softmax_last_axis,
    softmax_scaled_last_axis,
    stack0,
    strided_conv,
    subtract,
    sum_all,
    transpose,
    transposed_upsample,
)

__all__ = [
    "AdamW",
    "ParamTensor",
    "ParameterStore",
    "Var",
    "absolute",
    "add",
    "attention_core",
    "backward",
    "check_finite",
    "clip01",
    "concat_channels",
    "constant",
    "depthwise_conv3x3",
    "exp",
    "gelu",
    "grad_check",
    "layer_forward",
    "layer_norm",
    "leaf",
    "load_checkpoint",
    "matmul",
    "mean_all",
    "multiply",
    "pointwise_conv",
    "reshape",
    "save_checkpoint",
    "scale",
    "slice0",
    "softmax_last_axis",
    "softmax_scaled_last_axis",
    "stack0",
    "strided_conv",
    "subtract",
    "sum_all",
    "transpose",
    "transposed_upsample",
]
