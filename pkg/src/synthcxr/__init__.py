"""Synthetic chest X-ray curation, pneumonia classifier training and external validation."""

__version__ = "0.1.0"
