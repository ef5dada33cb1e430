"""Locally conditioned descriptor fields for few-shot pick-and-place transfer."""

__version__ = "0.1.0"
