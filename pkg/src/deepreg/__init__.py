"""Jointly trained regression cascades for 2-D landmark localization."""

__version__ = "0.1.0"
