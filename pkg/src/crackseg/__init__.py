"""Crack segmentation with a recurrent-residual attention U-Net and a
confidence-ranked few-shot rectification loop."""

__version__ = "0.1.0"
