"""Desk-scale lab for semi-supervised disentanglement learning with VAEs."""

from . import autodiff, data, losses, metrics, models, nn, train

__all__ = ["autodiff", "data", "losses", "metrics", "models", "nn", "train"]
