"""Federated learning simulator with bandit-based robust aggregation."""

__version__ = "0.1.0"
