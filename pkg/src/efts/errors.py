class EftsError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 3


class ConfigError(EftsError, ValueError):
    exit_code = 2


class ShapeError(EftsError, ValueError):
    pass


class ContractError(EftsError, ValueError):
    pass


class SamplingError(EftsError, ValueError):
    pass


class NumericError(EftsError, ArithmeticError):
    pass


class DegenerateDenominatorError(NumericError):
    pass
