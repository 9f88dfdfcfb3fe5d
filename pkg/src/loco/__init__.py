"""Semi-supervised segmentation of low-contrast images (LoCo)."""

__version__ = "0.1.0"
