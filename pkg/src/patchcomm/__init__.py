"""Desk-scale laboratory for emergent patch-based communication."""

__version__ = "0.1.0"
