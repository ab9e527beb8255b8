"""Interval forecasting with a chaotic-fusion graph convolutional network."""

__version__ = "0.1.0"
