"""Anisotropic eikonal modelling and conductivity inversion on surfaces."""

__version__ = "0.1.0"
