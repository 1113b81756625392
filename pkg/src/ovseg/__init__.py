"""Desk-scale open-vocabulary semantic segmentation toolkit."""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
