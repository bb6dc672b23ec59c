"""Compositional CATE estimation for structured units."""

__version__ = "0.1.0"
