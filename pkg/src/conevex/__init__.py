"""Convex-geometric invariants of cone-asymptotic convex domains."""

__version__ = "0.1.0"
