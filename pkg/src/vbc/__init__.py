"""Variance-based control for communication-efficient multi-agent Q-learning."""

__version__ = "0.1.0"
