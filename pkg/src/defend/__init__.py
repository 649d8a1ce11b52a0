"""Multimodal tobacco-product representation learning at desk scale."""

__version__ = "0.1.0"
