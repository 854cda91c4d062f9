"""Desk-scale on-policy self-distillation laboratory."""

__version__ = "0.1.0"
