"""Flexible-length 1D image tokenizer with redundant token padding."""

__version__ = "0.1.0"
