"""Uncertainty-enhanced iterative preference optimization on a toy synthetic world."""

__version__ = "0.1.0"
