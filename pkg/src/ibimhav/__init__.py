"""Volumetric vessel segmentation with 3D shifted-window attention."""

__version__ = "0.1.0"
