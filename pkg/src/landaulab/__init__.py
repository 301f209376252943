"""Numerical laboratory for the homogeneous Landau equation with hard potentials."""

__version__ = "0.1.0"
