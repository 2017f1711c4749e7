"""Landmark detection with domain adaptation and landmark description with multi-view attention regularization."""

__version__ = "0.1.0"
