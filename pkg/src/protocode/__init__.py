"""Few-shot classification of toy-language programs via prototypical embeddings."""

__version__ = "0.1.0"
