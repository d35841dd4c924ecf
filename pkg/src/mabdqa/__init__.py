"""Bandit-guided multi-aspect retrieval and reflective answering for multi-page documents."""

__version__ = "0.1.0"
