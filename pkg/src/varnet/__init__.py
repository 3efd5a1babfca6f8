"""Variance networks: locality sampling, split training, Student-t heads and extrapolation."""

__version__ = "0.1.0"
