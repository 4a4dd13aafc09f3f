"""Single-image lifting to pixel-aligned 3D Gaussians, trained with visibility masks."""

__version__ = "0.1.0"
