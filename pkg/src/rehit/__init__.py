"""Mask-free shadow removal with Retinex branches and histogram attention, on NumPy."""

__version__ = "0.1.0"
