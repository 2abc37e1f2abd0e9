"""Reverse-mode differentiation on numpy arrays, parameters and Adam."""
from .params import Adam, NonFiniteGradient, ParamStore, adam_step, clip_grad_norm, load_checkpoint, save_checkpoint
from .tensor import (
    GraphError, Tensor, add, affine, as_tensor, backward, broadcast_to, clip, concat, custom_op, div, embedding,
    energy_op, exp, getitem, grad_enabled, log, matmul, mean, mul, neg, no_grad, power, relu, reshape,
    silu, softmax, sqrt, square, sub, tanh, transpose, tsum, unbroadcast,
)

__all__ = [
    "Adam", "GraphError", "NonFiniteGradient", "ParamStore", "Tensor", "adam_step", "add", "affine",
    "as_tensor", "backward", "broadcast_to", "clip", "clip_grad_norm", "concat", "custom_op", "div", "embedding", "energy_op", "exp",
    "getitem", "grad_enabled", "load_checkpoint", "log", "matmul", "mean", "mul", "neg", "no_grad",
    "power", "relu", "reshape", "save_checkpoint", "silu", "softmax", "sqrt", "square", "sub", "tanh",
    "transpose", "tsum", "unbroadcast",
]
