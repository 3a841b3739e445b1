"""Decompose per-ROI brain responses into patterns and find natural-language explanations for them."""

__version__ = "0.1.0"
