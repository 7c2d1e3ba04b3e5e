"""Exception types shared across the package."""


class PhnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PhnError, ValueError):
    pass


class ConfigError(PhnError, ValueError):
    pass


class ContractError(PhnError, ValueError):
    """A caller broke a documented precondition."""


class BatchSizeError(PhnError, ValueError):
    pass


class EmptyBatchError(ContractError):
    pass


class ParseError(PhnError, ValueError):
    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class UndefinedMetricError(PhnError, ValueError):
    pass


class UnsupportedConfigError(PhnError, ValueError):
    pass


class NumericError(PhnError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    """Training produced a non-finite loss.

    ``payload`` carries enough context (epoch, step, last finite metrics)
    to reproduce the failure.
    """

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = dict(payload or {})
