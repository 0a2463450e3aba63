"""Forecasting downstream-task accuracy from training trajectories and token losses."""

__version__ = "0.1.0"
