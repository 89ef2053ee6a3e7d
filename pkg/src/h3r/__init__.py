"""Feed-forward 3D Gaussian reconstruction from posed images with plane-sweep latent volumes."""

__version__ = "0.1.0"
