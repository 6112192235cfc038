"""Pose-free feed-forward Gaussian splatting from unposed sparse views."""

__version__ = "0.1.0"
