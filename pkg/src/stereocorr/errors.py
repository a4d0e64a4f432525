"""Exception types shared across the package."""


class StereoError(Exception):
    """Base class for all package errors."""


class NonPositiveDisparity(StereoError, ValueError):
    """Raised when x_l - x_r <= 0, i.e. the target is at or beyond infinity."""


class BehindCamera(StereoError, ValueError):
    pass


class InfeasibleScene(StereoError, RuntimeError):
    pass


class EmptyInput(StereoError, ValueError):
    pass


class EmptyHardSet(StereoError, RuntimeError):
    pass


class ParseError(StereoError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class ModelFormatError(StereoError, ValueError):
    """Weight document does not match its declared config or format version."""
