"""Free-space corridor dataset generation and contour diffusion."""

__version__ = "0.1.0"
