"""Self-supervised embeddings for tabular clinical time series."""

__version__ = "0.1.0"
