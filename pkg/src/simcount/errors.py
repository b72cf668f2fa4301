"""Exception types shared across the library."""


class GeometryError(ValueError):
    """Raised when a spatial configuration is impossible (kernel > grid, odd kernel, ...)."""


class ShapeMismatchError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated, has a bad magic, or an unreadable manifest."""


class SchemaVersionError(CheckpointError):
    """Checkpoint was written with an unsupported schema version."""


class MalformedAnnotationError(ValueError):
    """Dataset annotation file exists but does not follow the expected schema."""


class InfeasiblePackingError(RuntimeError):
    """Synthetic scene generation could not place the requested object count."""


class EmptySplitError(ValueError):
    """Evaluation was asked to run on an empty record list."""


class NaNLossError(RuntimeError):
    """Training aborted because the loss became non-finite."""

    def __init__(self, step: int, batch_ids):
        self.step = step
        self.batch_ids = list(batch_ids)
        super().__init__(f"non-finite loss at step {step} (batch record ids: {self.batch_ids})")


class MissingAuxiliaryError(RuntimeError):
    """Exemplar-guided loss requested but the model produced no auxiliary count."""
