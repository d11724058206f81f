"""Desk-scale StNet and iTXN video architectures on a minimal autodiff core."""

from .rng import RngStream
from .tensor import (Grads, NumericsError, ShapeError, Tape, Tensor,
                     set_finite_checks)

__version__ = "0.1.0"

__all__ = [
    "Grads", "NumericsError", "RngStream", "ShapeError", "Tape", "Tensor",
    "set_finite_checks", "__version__",
]
