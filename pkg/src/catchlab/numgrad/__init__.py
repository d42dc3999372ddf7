from .checkpoint import CheckpointError, load_arrays, save_arrays
from .gradcheck import grad_check
from .optim import AdamW
from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    attention,
    concat,
    layer_norm,
    softmax,
    squared_error,
)

__all__ = [
    "AdamW",
    "CheckpointError",
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "attention",
    "concat",
    "grad_check",
    "layer_norm",
    "load_arrays",
    "save_arrays",
    "softmax",
    "squared_error",
]
