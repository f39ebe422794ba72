"""Episodic-free task selection for few-shot learning, at desk scale."""

__version__ = "0.1.0"
