"""Desk-scale quantization-aware training for state-space image restoration."""

from .io import __version__

__all__ = ["__version__"]
