"""Unified tooth enumeration and dental disease detection."""

__version__ = "0.1.0"
