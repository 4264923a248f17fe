"""Exception hierarchy for tdeedspot.

All errors raised on purpose by the package derive from :class:`TdeedError` so callers (the CLI
in particular) can map them onto exit codes.
"""

from typing import Any, Dict, Optional


class TdeedError(Exception):
    """Base class of every error raised deliberately by tdeedspot."""


class ConfigError(TdeedError, ValueError):
    """Invalid configuration value.

    Attributes:
        field: Dotted name of the offending configuration field (if known).
    """

    def __init__(self, message: str, field: Optional[str] = None) -> None:
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ContractError(TdeedError, ValueError):
    """A shape, length or finiteness contract of an operation was violated."""


class RangeError(ContractError, IndexError):
    """An index or window lies outside the valid range."""


class DivergenceError(TdeedError, RuntimeError):
    """Training produced a non-finite loss.

    Attributes:
        diagnostic: Where and how it happened (epoch, step, loss components, lr).
    """

    def __init__(self, message: str, diagnostic: Optional[Dict[str, Any]] = None) -> None:
        self.diagnostic: Dict[str, Any] = diagnostic or {}
        super().__init__(f"{message} {self.diagnostic}" if self.diagnostic else message)
