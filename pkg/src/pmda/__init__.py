"""Multi-domain adaptation for semantic segmentation of stylized images."""

__version__ = "0.1.0"
