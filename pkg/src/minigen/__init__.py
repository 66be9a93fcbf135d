"""Summarization as language modeling: a desk-scale toolkit."""

__version__ = "0.1.0"
