"""Penalty-aware robust query plan selection over a miniature join optimizer."""

__version__ = "0.1.0"
