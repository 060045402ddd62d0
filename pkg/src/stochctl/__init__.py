"""Numerical toolkit for stochastic controllability and optimal control."""

__version__ = "0.1.0"
