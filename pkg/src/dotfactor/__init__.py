"""Split-latent VAE trained with latent interventions, plus synthetic
factored datasets and disentanglement metrics."""

__version__ = "0.1.0"
