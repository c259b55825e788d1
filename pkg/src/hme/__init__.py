"""Hierarchical meta-embeddings and a Transformer-CRF labeler for code-switched NER."""

__version__ = "0.1.0"
