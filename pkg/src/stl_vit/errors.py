"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An argument violates a documented precondition (bad rate, bad config...)."""


class ShapeError(ValueError):
    """Tensor extents are incompatible with the requested operation."""


class FormatError(ValueError):
    """A serialized artifact (checkpoint, IDX file, report) is malformed."""


class StateError(RuntimeError):
    """An object is used before it is ready (e.g. forward on an uninitialized model)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training; carries the offending step."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
