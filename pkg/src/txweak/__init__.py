"""Weakly supervised classification of bank transaction groups."""

__version__ = "0.1.0"
