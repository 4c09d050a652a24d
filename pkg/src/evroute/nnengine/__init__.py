"""Minimal reverse-mode autodiff engine: tensors, tape, layers, Adam, checks."""

from .checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .gradcheck import GradCheckReport, grad_check
from .optim import AdamState, adam_step
from .tensor import (
    ContractError,
    EmptyBatchError,
    FiniteCheckError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    add,
    affine,
    backward,
    causal_masked_fill,
    concat,
    gelu,
    layer_norm,
    mae_loss,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    slice_,
    softmax_last_dim,
    sub,
    sum_all,
    tanh,
    transpose,
)

__all__ = [
    "AdamState",
    "Checkpoint",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "ContractError",
    "EmptyBatchError",
    "FiniteCheckError",
    "GradCheckReport",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "affine",
    "backward",
    "causal_masked_fill",
    "concat",
    "gelu",
    "grad_check",
    "layer_norm",
    "load_checkpoint",
    "mae_loss",
    "matmul",
    "mul",
    "relu",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "slice_",
    "softmax_last_dim",
    "sub",
    "sum_all",
    "tanh",
    "transpose",
]
