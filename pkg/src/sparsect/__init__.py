"""Sparse-view fan-beam CT simulation and coarse-to-fine reconstruction."""

__version__ = "0.1.0"
