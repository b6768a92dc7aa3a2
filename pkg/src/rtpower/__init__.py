"""Simulation-based power analysis for crossed participant x item response-time designs."""
__version__ = "0.1.0"
