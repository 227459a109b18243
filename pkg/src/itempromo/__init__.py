"""Masked targeted topological item-promotion attacks on LightGCN-style recommenders."""

__version__ = "0.1.0"
