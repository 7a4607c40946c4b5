"""Metric learning and single-pass metric estimation for nearest-neighbor prediction."""

__version__ = "0.1.0"
