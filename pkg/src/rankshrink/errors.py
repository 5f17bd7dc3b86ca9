"""Exception types shared across the toolkit.

Every public operation distinguishes bad inputs (caller error) from runtime
failures (numerical breakdown, training divergence, search starvation), so
callers can branch on the category instead of parsing messages.
"""


class RankshrinkError(Exception):
    """Base class for all toolkit errors."""


class RejectedInputError(RankshrinkError, ValueError):
    """An argument violates a documented precondition."""


class NumericalFailureError(RankshrinkError, RuntimeError):
    """An iterative numerical routine failed to converge.

    ``residual`` carries the relevant remaining error measure when known.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class TrainingFailureError(RankshrinkError, RuntimeError):
    """Training diverged. Carries the last finite checkpoint and loss history."""

    def __init__(self, message: str, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = list(history) if history is not None else []


class DecodeFailureError(RankshrinkError, RuntimeError):
    """No token survived pruning. ``frame_index`` names the frame that starved."""

    def __init__(self, message: str, frame_index: int):
        super().__init__(message)
        self.frame_index = frame_index
