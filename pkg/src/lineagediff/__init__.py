"""Taxonomy-conditioned continuous diffusion for protein sequences."""

__version__ = "0.1.0"
