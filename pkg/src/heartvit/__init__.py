"""Hessian-guided token and head pruning for Vision Transformers."""

__version__ = "0.1.0"
