"""Concept erasure methods and concept-inversion attacks on a small conditional pixel diffusion model."""

__version__ = "0.1.0"
