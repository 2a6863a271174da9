"""Weakly-supervised temporal action localization with iterative pseudo-label refinement."""

__version__ = "0.1.0"
