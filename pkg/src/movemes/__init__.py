"""Rotation-invariant latent factor models for moveme discovery from 2-D poses."""

__version__ = "0.1.0"
