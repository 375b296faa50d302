"""Contrastive user-model pre-training (masked behavior prediction + behavior
sequence matching with medium-hard negatives) on numpy."""

__version__ = "0.1.0"
