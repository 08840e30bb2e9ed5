"""Confidence-based co-paced curriculum training for a tiny one-category detector."""

__version__ = "0.1.0"
