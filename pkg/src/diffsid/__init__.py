"""Generative recommendation with semantic IDs learned jointly with the recommender."""

__version__ = "0.1.0"
