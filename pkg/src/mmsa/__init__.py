"""Model-based multi-agent value learning with learned state-action embeddings."""
__version__ = "0.1.0"
