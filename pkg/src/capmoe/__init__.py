"""Unbiased gradient estimators for mixture-of-experts routing under expert capacity."""

__version__ = "0.1.0"
