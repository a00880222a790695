"""
Exception hierarchy for GroupMix.

Every error raised on purpose by the package derives from GmxError so the CLI
can map it onto a stable exit code.
"""
from typing import Optional


class GmxError(Exception):
    """Base class for all GroupMix errors."""


class ConfigurationError(GmxError, ValueError):
    """Invalid configuration: divisibility, kernel parity, stride, resolution."""


class DimensionError(GmxError, ValueError):
    """Operand shapes do not agree."""


class ContractError(GmxError, ValueError):
    """A caller broke an operation's precondition."""


class FormatError(GmxError, ValueError):
    """A weight archive is malformed or does not match its target."""


class DivergenceError(GmxError, ArithmeticError):
    """Loss or gradient became non-finite."""

    def __init__(self, message: str, step: Optional[int] = None, path: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.path = path
