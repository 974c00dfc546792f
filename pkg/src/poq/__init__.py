"""Transformer multi-label classifier with primal object queries, built on a small numpy autodiff."""

__version__ = "0.1.0"
