"""Desk-scale LiDAR single-object tracking with state-space inter-frame propagation."""

__version__ = "0.1.0"
