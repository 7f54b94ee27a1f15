from .core import ParamSet, Tape, Tensor, accumulate_grad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import (
    OP_KINDS,
    PASS_THRESHOLD,
    check_all_ops,
    finite_diff_check,
    max_relative_error,
)
from .optim import Adam, SgdMomentum

__all__ = [
    "Adam",
    "CheckpointError",
    "OP_KINDS",
    "ParamSet",
    "PASS_THRESHOLD",
    "SgdMomentum",
    "Tape",
    "Tensor",
    "accumulate_grad",
    "check_all_ops",
    "finite_diff_check",
    "load_checkpoint",
    "max_relative_error",
    "save_checkpoint",
]
