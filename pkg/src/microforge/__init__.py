"""microforge: composite microstructure generation, homogenization,
masked-autoencoder pre-training, transfer learning, and saliency."""

__version__ = "0.1.0"
