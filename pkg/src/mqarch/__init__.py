"""Simulation and moment-based calibration of quadratic ARCH / Hawkes models."""

from ._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
