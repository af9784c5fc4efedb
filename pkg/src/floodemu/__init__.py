"""Flood inundation surrogate modelling toolkit."""

__version__ = "0.1.0"
