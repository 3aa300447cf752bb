"""Desk-scale graph-neural surrogate pipeline for boundary-driven flood forecasting."""

__version__ = "0.1.0"
