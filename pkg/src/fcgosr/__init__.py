"""Open set recognition over function call graphs with self-supervised pre-training."""

__version__ = "0.1.0"
