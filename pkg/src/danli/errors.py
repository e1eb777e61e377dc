"""Exception types shared across the package.

The CLI maps each family to an exit code: ``DataError`` -> 2,
``NumericError`` -> 3.
"""


class DanliError(Exception):
    """Base class for every error raised deliberately by this package."""


class ShapeError(DanliError, ValueError):
    pass


class MaskError(DanliError, ValueError):
    pass


class DataError(DanliError):
    """Malformed corpus, embedding file or checkpoint content."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.message = message
        self.path = path
        self.line = line


class NumericError(DanliError, ArithmeticError):
    """Non-finite values met in a loss, gradient or function evaluation."""


class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
