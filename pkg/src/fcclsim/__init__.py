"""Desk-scale simulator for heterogeneous federated learning with correlation-based collaboration."""

__version__ = "0.1.0"
