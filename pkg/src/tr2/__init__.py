"""Relation-aware video scene graph generation with temporal transformers and text-guided relation changes."""

__version__ = "0.1.0"
