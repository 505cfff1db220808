"""Exception hierarchy shared by every crforest module."""

from typing import List, Optional


class CensoredForestError(Exception):
    """Base class for all errors raised by crforest."""


class SchemaError(CensoredForestError):
    """CSV header does not match the x0..x{p-1},y,delta[,t] layout."""


class ParseError(CensoredForestError):
    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column


class DataValidationError(CensoredForestError):
    """Raised with every violated dataset invariant, not just the first."""

    def __init__(self, issues: List[str]):
        super().__init__("; ".join(issues))
        self.issues = list(issues)


class ConfigError(CensoredForestError):
    pass


class ParameterError(CensoredForestError):
    pass


class BandwidthError(CensoredForestError):
    """Kernel mass at the query point is zero."""


class EmptyLeafError(CensoredForestError):
    """The leaf reached by a query holds no weighting sample."""


class EstimationError(CensoredForestError):
    """No tree contributes a weight at the query point."""
