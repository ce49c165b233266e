"""Compartmentalizing compilation chain and isolation testing toolkit."""

__version__ = "0.1.0"
