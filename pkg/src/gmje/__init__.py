"""Gaussian and Gaussian-mixture joint embeddings."""

__version__ = "0.1.0"
