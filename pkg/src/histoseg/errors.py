"""Exception types shared across the package."""


class HistosegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(HistosegError):
    """A configuration value violates one of its invariants."""


class ShapeError(HistosegError):
    """A tensor does not have the shape an operation requires."""


class DatasetError(HistosegError):
    """A dataset directory or one of its files is malformed."""


class ManifestError(HistosegError):
    """A pretrained-weight manifest or its blob failed validation."""


class CheckpointError(HistosegError):
    """A checkpoint file could not be written, read, or verified."""


class TrainingError(HistosegError):
    """Training aborted, e.g. because the loss became non-finite."""
