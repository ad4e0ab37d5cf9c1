"""Exception types shared across the package."""


class GrayboxError(Exception):
    """Base class for all errors raised by graybox."""


class ConfigError(GrayboxError, ValueError):
    """Invalid configuration value or unstable configuration."""


class ContractError(GrayboxError, ValueError):
    """Arguments violate an operation's preconditions (shapes, lengths)."""


class DomainError(GrayboxError, ArithmeticError):
    """State outside the domain of the model equations (e.g. V <= 0)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class BlowupError(GrayboxError, ArithmeticError):
    """Numeric blowup: a state or gradient became huge or non-finite.

    ``sample`` and ``step`` locate the first offending point when known.
    """

    def __init__(self, message, sample=None, step=None):
        super().__init__(message)
        self.sample = sample
        self.step = step
