"""Finite-volume migration forecasting with learned velocities and sources."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
