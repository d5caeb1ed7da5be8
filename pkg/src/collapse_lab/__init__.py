"""Numerical laboratory for collapsing ends of 4-manifolds and flat screw quotients."""

__version__ = "0.1.0"
