"""Conditional-noise diffusion framework for robust point-cloud segmentation."""

__version__ = "0.1.0"
