"""Pixel-wise OoD scoring toolkit: flows, kNN densities, uncertainty scores, metrics, synthetic data."""

__version__ = "0.1.0"
