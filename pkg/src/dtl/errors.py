"""Exception types shared across the toolkit."""


class DtlError(Exception):
    """Base class for toolkit errors."""


class ContractError(DtlError, ValueError):
    """A documented precondition was violated."""


class ShapeError(ContractError):
    """Operand shapes do not conform."""


class InvalidLabelError(ContractError):
    pass


class MissingHeadError(ContractError, KeyError):
    pass


class DegenerateGradientError(DtlError, ArithmeticError):
    """A gradient needed as a direction has zero norm."""


class DivergenceError(DtlError, ArithmeticError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class AbortedComputation(DtlError, RuntimeError):
    """A simulated worker failed and the collective was torn down."""


class ParseError(DtlError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
