"""Sparse object-level SLAM: segmentation, gated association, factor-graph backend."""

__version__ = "0.1.0"
