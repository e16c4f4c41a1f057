"""Paired text-image data augmentation for cross-modal retrieval, at desk scale."""

__version__ = "0.1.0"
