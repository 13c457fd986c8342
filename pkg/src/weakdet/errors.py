"""Exception hierarchy.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class WeakDetError(Exception):
    exit_code = 1


class ConfigError(WeakDetError, ValueError):
    exit_code = 1


class DimensionError(WeakDetError, ValueError):
    exit_code = 1


class DataError(WeakDetError):
    exit_code = 2


class AnnotationError(DataError, ValueError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(WeakDetError, ArithmeticError):
    exit_code = 3


class CalibrationError(NumericError):
    pass


class MissingFileError(DataError, FileNotFoundError):
    pass


class MalformedRecordError(AnnotationError):
    pass


class OutOfBoundsError(AnnotationError):
    pass
