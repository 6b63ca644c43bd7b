"""Exception types raised across the package."""


class P2SError(Exception):
    """Base class; `exit_code` is what the CLI returns when it escapes."""

    exit_code = 1


class DataError(P2SError):
    exit_code = 3


class NumericError(P2SError):
    exit_code = 4


class DegenerateCloud(DataError):
    pass


class DegenerateNeighborhood(NumericError):
    pass


class ZeroField(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class ShapeMismatch(DataError):
    pass


class SizeMismatch(DataError):
    pass


class FormatError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.line = line
        self.path = path


class EmptyMesh(DataError):
    pass
