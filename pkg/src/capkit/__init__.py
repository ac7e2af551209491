"""Desk-scale image-captioning toolkit: inject/merge/multimodal LSTM captioners,
caption metrics, training pipeline and feature analytics."""

__version__ = "0.1.0"
