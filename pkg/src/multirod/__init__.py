"""Batch state estimation for systems of coupled continuum rods on SE(3)."""

__version__ = "0.1.0"
