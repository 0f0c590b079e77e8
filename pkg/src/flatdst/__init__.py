"""Flat shared-weight Transformer encoder-decoder for dialogue state tracking."""

__version__ = "0.1.0"
