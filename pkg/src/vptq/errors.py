"""Exception hierarchy shared by every module."""


class VPTQError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(VPTQError):
    pass


class UnsupportedLayout(FormatError):
    pass


class NonFiniteData(VPTQError):
    def __init__(self, index: int):
        super().__init__(f"non-finite element at flat index {index}")
        self.index = index


class IoError(VPTQError):
    pass


class ShapeError(VPTQError, ValueError):
    pass


class ConfigError(VPTQError, ValueError):
    """Invalid configuration. ``problems`` lists every violation found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class InsufficientData(VPTQError, ValueError):
    pass


class InvalidK(VPTQError, ValueError):
    pass


class NumericError(VPTQError, ArithmeticError):
    """Numerical failure (CLI exit code 4)."""


class NotPositiveDefinite(NumericError):
    def __init__(self, pivot: int, message: str = ""):
        super().__init__(message or f"Cholesky failed at pivot {pivot}")
        self.pivot = pivot


class InvalidHessian(NumericError):
    pass


class CorruptData(VPTQError):
    """Damaged stored data (CLI exit code 3)."""


class CorruptIndices(CorruptData):
    pass


class CorruptStream(CorruptData):
    pass


class CorruptContainer(CorruptData):
    pass


class IndexOverflow(VPTQError, ValueError):
    def __init__(self, position: int, value: int, bitwidth: int):
        super().__init__(f"index {value} at position {position} does not fit in {bitwidth} bits")
        self.position = position
