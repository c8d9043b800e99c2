"""Implicit occupancy reconstruction from noisy point clouds, MLP-only."""

__version__ = "0.1.0"
