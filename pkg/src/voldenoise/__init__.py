"""Self-supervised blind-spot denoising of 3D tomographic volumes."""

__version__ = "0.1.0"
