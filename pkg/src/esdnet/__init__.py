"""Compact multi-branch ensemble CNNs trained with embedded self-distillation."""

__version__ = "0.1.0"
