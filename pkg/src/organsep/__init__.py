"""Organ-separated volume-text learning for abdominal CT, at desk scale."""

__version__ = "0.1.0"
