class VMPError(Exception):
    """Base class for library errors."""


class ContractError(VMPError, ValueError):
    """An argument violates an operation's precondition."""


class DimensionError(ContractError):
    """Array shapes are incompatible."""


class NumericError(VMPError, ArithmeticError):
    """A computation produced NaN or Inf."""
