"""Closed-loop digital twin for a simulated O-RAN deployment."""

__version__ = "0.1.0"
