"""Grounded long-horizon plan evaluation and training-data generation."""

__version__ = "0.1.0"
