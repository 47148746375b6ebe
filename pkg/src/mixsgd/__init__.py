"""Decreasing-step projected SGD under mixing noise: simulation and verification tools."""

__version__ = "0.1.0"
