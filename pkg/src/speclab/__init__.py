"""Desk-scale speculative-decoding draft training and inference."""

__version__ = "0.1.0"
