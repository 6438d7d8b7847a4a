"""Occlusion-robust video person re-identification with spatio-temporal completion."""

__version__ = "0.1.0"
