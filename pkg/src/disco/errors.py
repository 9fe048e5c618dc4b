"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (e.g. a row with near-zero norm)."""


class DomainError(ValueError):
    """A scalar parameter is outside its valid domain (e.g. temperature <= 0)."""


class LayoutError(ValueError):
    """A shard layout is invalid, typically because the world size does not divide the batch."""


class CollectiveContractError(RuntimeError):
    """Ranks entered a collective with mismatched operations, shapes, or dtypes."""


class CollectiveTimeoutError(RuntimeError):
    """A collective did not complete within the configured timeout."""

    def __init__(self, message: str, missing_ranks: tuple[int, ...] = ()):
        super().__init__(message)
        self.missing_ranks = missing_ranks


class DeadlockError(RuntimeError):
    """The lockstep scheduler found no runnable rank while a collective was incomplete."""


class TrainingDivergenceError(RuntimeError):
    """A non-finite loss or gradient appeared during training."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step
