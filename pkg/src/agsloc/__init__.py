"""Adaptive graph sparsification for localising spatio-temporal GNN forecasters."""

__version__ = "0.1.0"
