"""Decomposable attention model for natural language inference, in numpy."""

__version__ = "0.1.0"
