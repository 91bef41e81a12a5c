"""Whole-volume transformer lung-cancer risk prediction on synthetic CT phantoms."""

__version__ = "0.1.0"

HORIZON = 6
