"""Joint aspect-category sentiment analysis with contextualized aspect embeddings."""

__version__ = "0.1.0"
