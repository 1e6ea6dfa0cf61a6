"""Feature-flow regularized training and structured filter pruning."""

from flowprune.tensor import (
    ConfigError,
    NumericalError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    param,
)

__all__ = [
    "ConfigError",
    "NumericalError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "param",
]

__version__ = "0.1.0"
