"""Variational model perturbation for source-free domain adaptation."""

__version__ = "0.1.0"
