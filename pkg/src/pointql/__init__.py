"""Quasi-likelihood intensity estimation for spatial point processes."""

__version__ = "0.1.0"
