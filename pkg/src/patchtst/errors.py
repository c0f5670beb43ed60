"""Exception hierarchy shared by every module."""


class PatchTSTError(Exception):
    """Base class for all package errors."""


class ShapeError(PatchTSTError, ValueError):
    pass


class ConfigError(PatchTSTError, ValueError):
    pass


class DataError(PatchTSTError, ValueError):
    pass


class TrainingError(PatchTSTError, RuntimeError):
    pass


class CheckpointError(PatchTSTError, ValueError):
    pass
