"""Evaluation-oriented knowledge distillation for embedding models."""
__version__ = "0.1.0"
