"""Exception types shared across the package."""


class LfvgError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(LfvgError):
    """An argument violates a documented precondition."""


class StoreError(LfvgError):
    """A feature store or checkpoint failed to load or validate."""


class SkipProposal(LfvgError):
    """A temporal proposal contains no frames; the caller should drop it."""


class TrainingDataError(LfvgError):
    """The training split yields no usable (video, proposal) pairs."""


class EvaluationError(LfvgError):
    """The evaluation split is inconsistent (e.g. dangling video ids)."""


class NumericError(LfvgError):
    """A numeric failure (NaN/Inf loss) occurred; carries the step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ContractViolationError(LfvgError):
    """A runtime contract was violated (e.g. a loss that should be
    deterministic under pinned seeds returned two different values)."""
