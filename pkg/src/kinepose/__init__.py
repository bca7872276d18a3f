"""Desk-scale video pose estimation with a joint-level temporal attention module."""

__version__ = "0.1.0"
