"""Synthetic detection-data generation by compositing object views onto RGB-D scenes."""

__version__ = "0.1.0"
