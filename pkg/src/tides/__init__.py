"""Selective state-space models with physical-time discretization."""

__version__ = "0.1.0"
