"""Surround-camera metric depth estimation at desk scale."""

__version__ = "0.1.0"
