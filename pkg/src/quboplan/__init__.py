"""Hybrid annealing-based join-order optimization toolkit."""

__version__ = "0.1.0"
