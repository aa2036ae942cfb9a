"""Encode-Identify-Manipulate editing on toy diffusion models."""

__version__ = "0.1.0"
