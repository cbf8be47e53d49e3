"""MLSP: multi-level spatially pooled features for aesthetic quality regression."""

__version__ = "0.1.0"
