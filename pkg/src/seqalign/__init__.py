"""Weakly supervised sequence representations for step-ordered videos."""

__version__ = "0.1.0"
