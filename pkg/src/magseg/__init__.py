"""Modality-agnostic multi-modal segmentation at desk scale."""

__version__ = "0.1.0"
