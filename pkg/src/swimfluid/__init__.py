"""Coupled fluid / articulated-swimmer simulator with well-posedness diagnostics."""

__version__ = "0.1.0"
