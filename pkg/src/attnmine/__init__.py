"""Unsupervised driving-attention prediction at desk scale.

Trains a small encoder-decoder attention predictor from multiple noisy
pseudo-label sources, weighting each source by a learned per-frame
uncertainty and optionally boosting label mass inside instance masks of
traffic-critical objects.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, finite_diff_gradient
from .errors import AttnmineError, ConfigError, DataError, NumericError

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_gradient",
    "AttnmineError",
    "ConfigError",
    "DataError",
    "NumericError",
    "__version__",
]
