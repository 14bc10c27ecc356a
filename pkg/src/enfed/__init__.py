"""Federated exposure-notification backends with pull-based key replication."""

__version__ = "0.1.0"
