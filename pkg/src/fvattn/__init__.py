"""Orderless Fisher Vector encoding of multi-stage attention features."""

__version__ = "0.1.0"
