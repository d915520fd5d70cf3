"""Reliability-based policy optimization on learned surrogate dynamics."""

__version__ = "0.1.0"
