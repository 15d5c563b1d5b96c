"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class FormatError(ValueError):
    """A serialized file (dataset, checkpoint, gene) is malformed."""


class InfeasibleConstraintError(RuntimeError):
    """Rejection sampling could not satisfy the resource constraint."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss
