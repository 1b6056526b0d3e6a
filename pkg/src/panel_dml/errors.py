"""Exception taxonomy shared across the package."""


class PanelDMLError(Exception):
    """Base class for all errors raised by panel_dml."""


class ConfigError(PanelDMLError):
    """Invalid configuration: bad option values, unresolvable dictionary selectors, etc."""


class DataError(PanelDMLError):
    """Base class for malformed input data."""


class BalanceError(DataError):
    """Panel is not balanced: some (unit, period) cell is missing."""


class ParseError(DataError):
    """A record could not be parsed (non-numeric value, bad header, inconsistent invariant)."""


class DuplicateError(DataError):
    """The same (unit, period) pair appears more than once."""


class LagError(PanelDMLError):
    """Requested estimand or transform reaches before the first observed period."""


class DomainError(PanelDMLError):
    """Requested variable or index is outside the object it is asked of."""


class SelfDemeanError(PanelDMLError):
    """Cross-fold demeaning was asked to demean a fold against itself."""


class ShapeError(PanelDMLError):
    """Array arguments have inconsistent shapes."""


class NumericError(PanelDMLError):
    """Numerical failure: solver non-convergence, singular system, non-finite values."""
