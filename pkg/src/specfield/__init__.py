"""Explicit-grid hyperspectral radiance field with spectral unmixing."""

__version__ = "0.1.0"
