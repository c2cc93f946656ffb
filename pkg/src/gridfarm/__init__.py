"""Deadline- and budget-driven task farming over a simulated compute grid."""

__version__ = "0.1.0"
