from . import ops
from .checkpoint import CheckpointError, load_params, save_params
from .tensor import (
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    is_grad_enabled,
    no_grad,
    reset_tape,
)

__all__ = [
    "CheckpointError",
    "NonFiniteError",
    "Tape",
    "TapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "current_tape",
    "is_grad_enabled",
    "load_params",
    "no_grad",
    "ops",
    "reset_tape",
    "save_params",
]
