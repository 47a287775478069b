"""Integrated power and thermal management MPC for electric-vehicle fast charging."""

__version__ = "0.1.0"
