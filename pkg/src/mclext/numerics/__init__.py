"""Dense tensors with tape-based reverse-mode differentiation."""
from . import ops
from .gradcheck import GradReport, grad_check, relative_error
from .tensor import Tape, Tensor, active_tape, as_tensor

__all__ = ["ops", "Tape", "Tensor", "as_tensor", "active_tape", "grad_check", "GradReport", "relative_error"]
