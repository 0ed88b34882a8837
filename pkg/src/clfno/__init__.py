"""Continual operator learning with Fourier neural operators."""

__version__ = "0.1.0"
