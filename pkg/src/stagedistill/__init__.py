"""Staged knowledge distillation with teaching-assistant cascades."""

__version__ = "0.1.0"
