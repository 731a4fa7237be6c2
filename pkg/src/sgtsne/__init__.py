"""Sparse-graph stochastic neighbor embedding in one to three dimensions."""

__version__ = "0.1.0"
