"""Validation toolkit for hardware-event signatures of performance patterns."""

__version__ = "0.1.0"
