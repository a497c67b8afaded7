"""Multimodal spatio-temporal transformer for pixel-level yield regression."""

__version__ = "0.1.0"
