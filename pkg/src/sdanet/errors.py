class DataError(Exception):
    """Unreadable or malformed input data (annotations, images, indexes)."""


class CheckpointError(DataError):
    """Checkpoint file is truncated, inconsistent, or of an unknown version."""


class NumericalError(RuntimeError):
    """A loss or activation became non-finite during training."""
