"""Closed-loop set-point optimization for a synthetic film calendering line."""

__version__ = "0.1.0"
