"""Masked denoising generation for multi-agent trajectories."""

__version__ = "0.1.0"
