"""Confidence-aware sub-embedding learning with variation decorrelation."""

__version__ = "0.1.0"
