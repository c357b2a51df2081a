"""Parametrization method for parabolic invariant manifolds."""

__version__ = "0.1.0"
