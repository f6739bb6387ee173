"""Workbench for the stochastic joint replenishment problem."""
__version__ = "0.1.0"
