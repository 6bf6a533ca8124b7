"""Rendering of exported experiment artifacts as publication-style figures."""

__version__ = "0.1.0"
