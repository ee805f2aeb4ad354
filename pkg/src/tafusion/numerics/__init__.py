"""Deterministic float64 reverse-mode differentiation and the layers built on it."""

from .gradcheck import grad_check, weighted_sum
from .layers import (bilstm_forward, canonical_row_order, conv1d, dense, embedding_lookup,
                     global_avg_pool, gru_forward, linear, lstm_forward, mean_pool, mlp,
                     residual_conv1d_block, residual_stack, scaled_dot_attention)
from .optim import Adam, optimizer_step
from .params import ParameterSet
from .tensor import (Tensor, Trace, backward, concat, log_softmax, relu, sigmoid, softmax,
                     stack, tanh)

__all__ = [
    "Adam", "ParameterSet", "Tensor", "Trace", "backward", "bilstm_forward",
    "canonical_row_order", "concat", "conv1d", "dense", "embedding_lookup", "global_avg_pool",
    "grad_check", "gru_forward", "linear", "log_softmax", "lstm_forward", "mean_pool", "mlp",
    "optimizer_step", "relu", "residual_conv1d_block", "residual_stack",
    "scaled_dot_attention", "sigmoid", "softmax", "stack", "tanh", "weighted_sum",
]
