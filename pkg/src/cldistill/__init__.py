"""Continual-learning distillation engine for a toy VQLA model."""

__version__ = "0.1.0"
