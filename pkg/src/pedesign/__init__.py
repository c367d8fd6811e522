"""Optimal data collection for policy evaluation in heteroscedastic linear bandits."""

__version__ = "0.1.0"
