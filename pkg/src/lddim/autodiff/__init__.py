from . import ops
from .checkpoint import CheckpointError
from .nn import Conv2d, ConvTranspose2d, Dense, Module, ParameterSet
from .optim import Adam, ArrayAdam, NonFiniteGradientError, adam_step
from .tensor import ShapeError, Tape, Tensor, backward, vjp

__all__ = [
    "ops", "Tensor", "Tape", "backward", "vjp", "ShapeError", "Module", "ParameterSet",
    "Dense", "Conv2d", "ConvTranspose2d", "Adam", "ArrayAdam", "adam_step",
    "NonFiniteGradientError", "CheckpointError",
]
