"""Invisible-unit detection in grid telemetry with random-matrix statistics."""

__version__ = "0.1.0"
