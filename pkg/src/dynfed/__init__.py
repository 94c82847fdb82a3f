"""Deterministic desk-scale simulator for dynamically regularized federated optimization."""

__version__ = "0.1.0"
