from .tape import Tape, Node, Parameter, ShapeError, active_tape
from .optim import Adam
from .gradcheck import finite_diff_grad, max_rel_error, check_gradients
from . import ops

__all__ = [
    "Tape", "Node", "Parameter", "ShapeError", "active_tape", "Adam",
    "finite_diff_grad", "max_rel_error", "check_gradients", "ops",
]
