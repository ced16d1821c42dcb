"""Finite-volume laboratory for damped semilinear waves on conformally perturbed metrics."""

__version__ = "0.1.0"
