"""reidlab: desk-scale re-identification experiments.

A small numerical stack (dense tensors + tape autodiff), channel/position
attention modules, a spectral-gap orthogonality regularizer with
power-iteration eigenvalue estimates, re-id losses, a toy two-branch
network with its training schedule, and retrieval/de-correlation metrics.
"""

from . import ops as _ops  # noqa: F401  (populates the op registry)

from .errors import (  # noqa: F401
    ConfigError, ContractError, OracleError, ShapeError, UnsupportedOpError,
)
from .tensor import Tensor, Shape2, Shape3  # noqa: F401
from .tape import Tape, Var, GradientMap, backward, finite_diff_check  # noqa: F401

__version__ = "0.1.0"
