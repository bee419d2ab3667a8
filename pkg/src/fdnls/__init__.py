"""Spectral Galerkin laboratory for the fractional NLS with exponential nonlinearity."""

__version__ = "0.1.0"
