"""Two-stage diffusion-feature classifier for imbalanced image data."""

__version__ = "0.1.0"
