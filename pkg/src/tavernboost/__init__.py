"""Gradient-boosted trees with exact Shapley attribution for imbalanced clinical cohorts."""

__version__ = "0.1.0"
