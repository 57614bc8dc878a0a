"""FisherNet: a variational autoencoder whose latent posterior covariance
is the inverse of a decoder-derived Fisher metric, applied matrix-free and
sampled with conjugate gradients, alongside a standard-VAE baseline."""

from fishergen.backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
