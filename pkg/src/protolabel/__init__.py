"""Unsupervised 3D pseudo-labels from LiDAR sequences."""

__version__ = "0.1.0"
