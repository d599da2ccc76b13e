"""Soft Q-learning for sequence generation with path-consistency objectives."""
__version__ = "0.1.0"
