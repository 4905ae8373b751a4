"""Lean structured convolutions: operators, kernels, networks and tooling."""

__version__ = "0.1.0"
