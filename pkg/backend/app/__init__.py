"""repmetric: compare learned image representations from precomputed embeddings."""

__version__ = "1.0.0"
