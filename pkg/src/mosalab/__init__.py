"""Mixture of Sparse Attention: content-based token selection per attention head."""

__version__ = "0.1.0"
