"""Exception hierarchy shared by every vfnet module."""


class VFNetError(Exception):
    """Base class for all package errors."""


class PreconditionError(VFNetError, ValueError):
    pass


class ParseError(VFNetError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyFileError(ParseError):
    pass


class DegenerateGeometryError(VFNetError, ValueError):
    pass


class ShapeError(VFNetError, ValueError):
    pass


class StateError(VFNetError, RuntimeError):
    pass


class CapExceededError(VFNetError, ValueError):
    pass


class ChecksumError(VFNetError, IOError):
    pass


class VersionMismatchError(VFNetError, IOError):
    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"checkpoint format version {found} does not match supported version {expected}")


class SaturationError(VFNetError, RuntimeError):
    pass


class TrainingDivergedError(VFNetError, ArithmeticError):
    """Raised when the objective stops being finite; carries the last finite checkpoint."""

    def __init__(self, message: str, checkpoint=None, epoch: int | None = None):
        self.checkpoint = checkpoint
        self.epoch = epoch
        super().__init__(message)


class ConfigError(VFNetError, ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")
