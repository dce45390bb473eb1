"""Unfolded DetNet MIMO detection with incremental training, sparse-group
LASSO regularization, structured pruning and memory/FLOP accounting."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402
