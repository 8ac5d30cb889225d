"""Reinforced memory management for class-incremental learning."""

__version__ = "0.1.0"
