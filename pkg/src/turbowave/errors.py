"""Exception taxonomy shared across the package."""


class TurbowaveError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TurbowaveError):
    """Invalid or inconsistent configuration values."""


class DataError(TurbowaveError):
    """Rejected input data (non-finite samples, unreadable files, bad codecs)."""


class ShapeError(TurbowaveError):
    """Mismatched tensor shapes or structurally incompatible inputs."""


class LengthError(TurbowaveError):
    """Input shorter than an operation's minimum supported length."""


class CheckpointError(TurbowaveError):
    """Corrupt, tampered, or version-incompatible checkpoint archives."""


class TrainingDiverged(TurbowaveError):
    """A loss component became non-finite; training was halted."""
