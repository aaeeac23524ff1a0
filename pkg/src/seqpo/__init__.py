"""Sequence-level policy optimization on tiny autoregressive policies."""

__version__ = "0.1.0"
