"""Compositional text-to-motion: part-wise RVQ tokens, masked transformers, editing and agents."""

__version__ = "0.1.0"
