"""Exception types; the CLI maps them onto exit codes."""


class ContractError(ValueError):
    """Violated precondition (bad argument, empty input, inconsistent config)."""


class ShapeError(ContractError):
    pass


class FormatError(ContractError):
    """Malformed file contents."""


class NumericError(ArithmeticError):
    """Non-finite values or an ill-conditioned quantity."""
