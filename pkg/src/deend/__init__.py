"""Decoder-driven image watermarking."""

__version__ = "0.1.0"
