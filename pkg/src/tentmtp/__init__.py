"""Mapped tent pitching solvers for linear hyperbolic systems."""
__version__ = "0.1.0"
