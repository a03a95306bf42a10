"""Quasi-periodic solutions of the forced Kirchhoff equation on truncated Fourier grids."""
__version__ = "0.1.0"
