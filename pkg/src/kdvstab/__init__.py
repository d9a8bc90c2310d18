"""Gramian-based boundary feedback stabilization for the KdV equation."""

__version__ = "0.1.0"
