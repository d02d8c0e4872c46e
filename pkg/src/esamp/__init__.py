"""Exploratory sampling: decode-time novelty steering from an online latent distiller."""

__version__ = "0.1.0"
