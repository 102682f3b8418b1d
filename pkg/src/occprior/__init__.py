"""Radiance-field reconstruction with occupancy grids seeded from noisy point clouds."""

__version__ = "0.1.0"
