"""Minimal dense-tensor engine with reverse-mode autodiff."""

from .core import (
    Parameter,
    Tape,
    Tensor,
    as_tensor,
    constant,
    default_dtype,
    get_default_dtype,
    set_debug_nan,
    set_default_dtype,
    tracing,
)
from .ops import (
    ATTENTION_PARAM_NAMES,
    BatchNormState,
    OpError,
    add,
    add_bias,
    add_const,
    batchnorm3d,
    clip_by_global_norm,
    concat,
    conv1x1,
    conv3d,
    div,
    global_norm,
    layernorm,
    log_clamped,
    matmul,
    maxpool3d,
    mean_all,
    mul,
    mul_bcast,
    multihead_cross_attention,
    pow_const,
    relu,
    reshape,
    rsub_const,
    scale,
    sigmoid,
    softmax,
    sum_all,
    sum_axes,
    transpose,
    upsample3d,
)
from .checkpoint import CheckpointError, load_arrays, save_arrays

__all__ = [
    "ATTENTION_PARAM_NAMES", "BatchNormState", "CheckpointError", "OpError",
    "Parameter", "Tape", "Tensor", "add", "add_bias", "add_const",
    "as_tensor", "batchnorm3d", "clip_by_global_norm", "concat", "constant",
    "conv1x1", "conv3d", "default_dtype", "div", "get_default_dtype",
    "global_norm", "layernorm", "load_arrays", "log_clamped", "matmul",
    "maxpool3d", "mean_all", "mul", "mul_bcast",
    "multihead_cross_attention", "pow_const", "relu", "reshape",
    "rsub_const", "save_arrays", "scale", "set_debug_nan",
    "set_default_dtype", "sigmoid", "softmax", "sum_all", "sum_axes",
    "tracing", "transpose", "upsample3d",
]
