"""Sparse, Doppler-guided query communication for cooperative BEV perception."""

__version__ = "0.1.0"
