"""Dual-branch transformer few-shot classification with metric fusion."""

__version__ = "0.1.0"
