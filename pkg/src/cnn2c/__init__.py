"""Ahead-of-time compiler from small trained CNNs to dependency-free C."""

__version__ = "0.1.0"
