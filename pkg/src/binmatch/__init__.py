"""Binaural signal matching, online expert blending, and field-of-view control."""

__version__ = "0.1.0"
