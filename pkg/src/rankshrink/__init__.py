"""rankshrink: SVD compression for small TDNN+LSTM frame classifiers.

Train a network on synthetic sequence data, factorize every affine transform
at an energy threshold, retrain the equivalent bottleneck architecture from
scratch, and measure what the compression buys with a pruned Viterbi decoder
and a real-time-factor benchmark.
"""

__version__ = "0.1.0"

from .errors import (
    DecodeFailureError,
    NumericalFailureError,
    RankshrinkError,
    RejectedInputError,
    TrainingFailureError,
)

__all__ = [
    "DecodeFailureError",
    "NumericalFailureError",
    "RankshrinkError",
    "RejectedInputError",
    "TrainingFailureError",
    "__version__",
]
