"""Numerical laboratory for the heat flow of closed (d-1)-forms on the flat torus."""

__version__ = "0.1.0"
