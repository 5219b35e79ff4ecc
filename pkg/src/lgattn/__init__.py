"""Grouped local-global attention language models on a from-scratch numpy autodiff."""

__version__ = "0.1.0"
