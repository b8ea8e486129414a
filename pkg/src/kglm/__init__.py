"""Desk-scale knowledge-graph fusion for small causal language models."""

__version__ = "0.1.0"
