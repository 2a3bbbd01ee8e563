"""Differentiable transmission (X-ray) rendering of triangle meshes."""

__version__ = "0.1.0"
