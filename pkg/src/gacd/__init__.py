"""Guided adversarial contrastive distillation of robust features."""

__version__ = "0.1.0"
