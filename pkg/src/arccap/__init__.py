"""Structured-prediction image captioning with adversarial robust cuts."""

__version__ = "0.1.0"
