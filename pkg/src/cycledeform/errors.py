"""Exception hierarchy shared by all modules."""


class CycleDeformError(Exception):
    """Base class for every error raised by this package."""


class DataError(CycleDeformError):
    """Input data is malformed or inconsistent (CLI exit code 2)."""


class NumericalError(CycleDeformError):
    """A numerical failure (CLI exit code 3)."""


class DegenerateCloud(DataError):
    pass


class LengthMismatch(DataError):
    pass


class LabelSpaceMismatch(DataError):
    pass


class InsufficientShapes(DataError):
    pass


class ParseError(DataError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class VersionMismatch(DataError):
    pass


class CorruptFile(DataError):
    pass


class ShapeMismatch(NumericalError):
    pass


class IndexOutOfRange(NumericalError):
    pass


class NonFiniteValue(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    pass
