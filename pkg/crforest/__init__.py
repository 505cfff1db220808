"""Censored quantile regression forests."""

__version__ = "0.1.0"
