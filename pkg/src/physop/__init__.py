"""Operator learning for hidden-physics discovery and PDE parameter identification."""

__version__ = "0.1.0"
