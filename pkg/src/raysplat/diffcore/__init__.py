"""Minimal reverse-mode autodiff engine and neural building blocks."""

from .tensor import (
    DiffError, PRIMITIVE_OPS, Tape, Tensor, active_tape, add, avg_pool2,
    bilinear_sample, concat, constant, conv1d_valid, conv3x3, cos, custom_op,
    div, exp, gelu, getitem, linsolve, log, matmul, mul, neg, param,
    pow_scalar, procrustes_rotation, relu, reshape, set_finite_checks,
    sigmoid, sin, softmax, softplus, sqrt, stack, stop_gradient, sub, tanh,
    tensor, tmean, transpose, tsum, where,
)
from .nn import (
    Conv3x3, CrossAttention, LayerNorm, Linear, Mlp, ParamStore,
    cross_attention, layer_norm,
)
from .optim import Adam, OptimError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
