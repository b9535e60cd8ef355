"""Desk-scale laboratory for background-preserving lesion synthesis."""

__version__ = "0.1.0"
