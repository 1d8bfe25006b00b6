"""Closed-loop object-level SLAM on a synthetic tabletop scene."""

__version__ = "0.1.0"
