"""Sharpness-aware fine-tuning and model merging at desk scale."""

__version__ = "0.1.0"
