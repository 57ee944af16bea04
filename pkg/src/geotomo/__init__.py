"""Geodesic X-ray tomography on surfaces with possibly non-convex boundary."""

__version__ = "0.1.0"
