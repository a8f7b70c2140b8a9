"""Exception hierarchy shared by every dsdlab module."""

from __future__ import annotations


class DSDError(Exception):
    """Base class for all dsdlab errors."""


class InvalidDistributionError(DSDError, ValueError):
    pass


class InvalidContextError(DSDError, ValueError):
    pass


class DegenerateMixtureError(DSDError, ValueError):
    """Softened distribution has zero normalizer (disjoint supports)."""


class DraftingContractError(DSDError, ValueError):
    """A verified token had zero probability under the draft distribution."""


class EmptyResidualError(DSDError, ValueError):
    pass


class EnumerationTooLargeError(DSDError, ValueError):
    pass


class IncomparableReportsError(DSDError, ValueError):
    pass


class InfeasibleBudgetError(DSDError):
    """No calibration grid point met the divergence budget.

    ``strictest`` carries the evaluated strictest grid point so callers can
    report how far off the budget was.
    """

    def __init__(self, message: str, strictest):
        super().__init__(message)
        self.strictest = strictest


class ConfigError(DSDError, ValueError):
    """Invalid experiment configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.message = message
        self.line = line
        self.source = source
        super().__init__(str(self))

    def __str__(self) -> str:
        where = f"{self.source}:{self.line}" if self.line is not None else self.source
        return f"{where}: {self.message}"
