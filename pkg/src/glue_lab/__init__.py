"""Numerical workbench for alternating-Newton gluing of pseudoholomorphic strips."""

__version__ = "0.1.0"
