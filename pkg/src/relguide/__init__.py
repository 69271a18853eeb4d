"""Relational-consensus guidance for image-guided feature upsampling, on a synthetic world."""

__version__ = "0.1.0"
