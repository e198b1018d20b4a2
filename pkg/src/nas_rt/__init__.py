"""Hardware-aware differentiable architecture search for 3D segmentation."""

from . import backend
from .autodiff import Tensor, backward, finite_diff_check, no_grad
from .errors import (ArgumentError, ConfigError, DataError, DecodeError,
                     FormatError, ShapeError, TableLookupError)

__version__ = "0.1.0"
