"""Weak-label guided pseudo-label fusion and self-training for LiDAR 3D detection."""

__version__ = "0.1.0"
