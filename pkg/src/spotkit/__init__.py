"""Structured-points-of-thought toolkit."""

__version__ = "0.1.0"
