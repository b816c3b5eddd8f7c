"""Gaussian multiplicative chaos: simulation and statistical verification toolkit."""

__version__ = "1.0.0"
