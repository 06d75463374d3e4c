"""Spike-driven transformer tracking for event cameras, on numpy."""

__version__ = "0.1.0"
