"""Federated learning simulator with tailored adaptive correction."""

__version__ = "0.1.0"
