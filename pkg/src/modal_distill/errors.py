"""Exception hierarchy. Each class carries the process exit code the CLI uses."""


class ModalDistillError(Exception):
    exit_code = 1


class ConfigError(ModalDistillError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    pass


class DimensionError(ConfigError):
    pass


class AlignmentError(ConfigError):
    pass


class UsageError(ModalDistillError):
    exit_code = 1


class NonFiniteError(ModalDistillError, FloatingPointError):
    exit_code = 1


class DataError(ModalDistillError, ValueError):
    exit_code = 3


class PersistenceError(ModalDistillError, OSError):
    exit_code = 4


class FormatError(PersistenceError):
    """Bad magic bytes or unsupported version."""

    exit_code = 5


class ManifestError(PersistenceError):
    exit_code = 6


class TruncatedError(PersistenceError):
    exit_code = 7


class ShapeError(DataError):
    exit_code = 8


class ConfigHashError(PersistenceError):
    exit_code = 9
