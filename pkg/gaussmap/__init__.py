"""Gauss-map mass transport from a convex body onto a ball."""

__version__ = "1.0.0"
