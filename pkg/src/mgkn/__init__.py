"""Multipole graph kernel networks for learning PDE solution operators."""

__version__ = "0.1.0"
