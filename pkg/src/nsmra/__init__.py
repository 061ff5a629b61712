"""Nonstationary multi-resolution approximation (M-RA) of Gaussian processes on the sphere."""

from ._core import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
