class EvcError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EvcError, ValueError):
    pass


class ConfigurationError(EvcError, ValueError):
    pass


class InputError(EvcError, ValueError):
    pass


class DataError(EvcError, ValueError):
    pass


class DomainError(EvcError, ArithmeticError):
    pass


class GradientError(EvcError, RuntimeError):
    pass


class TrainingDivergedError(EvcError, RuntimeError):
    pass


class CheckpointError(EvcError, IOError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CorruptManifestError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass
