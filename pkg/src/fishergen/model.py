"""Encoder/decoder assembly for the FisherNet and the baseline VAE.

A model owns one flat float64 parameter vector; the per-layer weight and
bias arrays of the encoder and decoder are views into it, and the
learnable log-noise scalar xi_n is its last entry.  The flat order (used
by the optimizer and checkpoints) is: encoder layers ascending, decoder
layers ascending, each layer W row-major then b, xi_n last.

Variants:

* ``fisher`` - the encoder outputs the latent mean only; the posterior
  covariance comes from the decoder metric (see fishermetric).  xi_n is
  trained.
* ``vae``    - the encoder outputs mean and per-dimension log-variance
  (head width 2 * latent_dim, mean first); the noise is fixed at
  sigma^2 = 1 and xi_n stays 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fishergen.autodiff import MlpSpec, ParamStore, Tape, forward
from fishergen.errors import NonFiniteError

FISHER = "fisher"
VAE = "vae"
VARIANTS = (FISHER, VAE)

PAPER_HIDDEN = (448, 448, 448)


def encoder_spec(variant: str, latent_dim: int, data_dim: int,
                 hidden: tuple[int, ...]) -> MlpSpec:
    head = latent_dim if variant == FISHER else 2 * latent_dim
    widths = (data_dim, *hidden, head)
    acts = ("relu",) * len(hidden) + ("identity",)
    return MlpSpec(widths, acts)


def decoder_spec(latent_dim: int, data_dim: int,
                 hidden: tuple[int, ...]) -> MlpSpec:
    widths = (latent_dim, *hidden, data_dim)
    acts = ("relu",) * len(hidden) + ("identity",)
    return MlpSpec(widths, acts)


class GenerativeModel:
    """FisherNet or baseline VAE: encoder g (data -> latent), decoder f
    (latent -> data) and the log-noise scalar xi_n with covariance
    exp(xi_n) * identity."""

    def __init__(self, variant: str, latent_dim: int, data_dim: int,
                 enc_spec: MlpSpec, dec_spec: MlpSpec):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        head = latent_dim if variant == FISHER else 2 * latent_dim
        if enc_spec.input_width != data_dim or enc_spec.output_width != head:
            raise ValueError("encoder spec does not match variant/dims")
        if dec_spec.input_width != latent_dim or dec_spec.output_width != data_dim:
            raise ValueError("decoder spec does not match dims")
        self.variant = variant
        self.latent_dim = latent_dim
        self.data_dim = data_dim
        self.encoder_spec = enc_spec
        self.decoder_spec = dec_spec
        self.n_params = enc_spec.n_params() + dec_spec.n_params() + 1
        self.flat = np.zeros(self.n_params)
        self.encoder = self._view_store(enc_spec, 0)
        self.decoder = self._view_store(dec_spec, enc_spec.n_params())

    def _view_store(self, spec: MlpSpec, offset: int) -> ParamStore:
        layers = []
        o = offset
        for (fi, fo), _ in spec.layer_shapes():
            W = self.flat[o:o + fi * fo].reshape(fi, fo)
            o += fi * fo
            b = self.flat[o:o + fo]
            o += fo
            layers.append((W, b))
        return ParamStore(layers)

    # -- parameters ------------------------------------------------------

    @property
    def xi_n(self) -> float:
        return float(self.flat[-1])

    @xi_n.setter
    def xi_n(self, value: float) -> None:
        if not np.isfinite(value):
            raise NonFiniteError("xi_n must be finite")
        self.flat[-1] = value

    def init_params(self, rng: np.random.Generator) -> None:
        """Glorot-uniform weights (encoder layers first, then decoder),
        zero biases, xi_n = 0."""
        for store, spec in ((self.encoder, self.encoder_spec),
                            (self.decoder, self.decoder_spec)):
            init = ParamStore.glorot(spec, rng)
            for (W, b), (Wi, bi) in zip(store.layers, init.layers):
                W[...] = Wi
                b[...] = bi
        self.flat[-1] = 0.0

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != self.flat.shape:
            raise ValueError("flat vector length mismatch")
        self.flat[...] = vec

    # -- evaluation ------------------------------------------------------

    def encode(self, d):
        """Latent mean (fisher) or (mean, logvar) (vae)."""
        y, _ = forward(self.encoder_spec, self.encoder, d)
        return self._split_head(y)

    def encode_with_tape(self, d):
        y, tape = forward(self.encoder_spec, self.encoder, d)
        return self._split_head(y), tape

    def _split_head(self, y):
        if self.variant == FISHER:
            return y
        L = self.latent_dim
        return y[..., :L], y[..., L:]

    def decode(self, z) -> np.ndarray:
        y, _ = forward(self.decoder_spec, self.decoder, z)
        return y

    def decode_with_tape(self, z) -> tuple[np.ndarray, Tape]:
        return forward(self.decoder_spec, self.decoder, z)

    def noise_sigma2(self) -> float:
        """exp(xi_n); the noise covariance is this times the identity.
        Overflow (xi_n > ~700) or underflow to zero signals divergent
        training."""
        xi = self.xi_n
        if not np.isfinite(xi) or xi > 700.0:
            raise NonFiniteError(f"noise scalar overflow: xi_n = {xi}")
        sigma2 = float(np.exp(xi))
        if sigma2 == 0.0:
            raise NonFiniteError(f"noise scalar underflow: xi_n = {xi}")
        return sigma2


@dataclass
class ModelGrads:
    """Gradients in the same structure as the model parameters."""

    encoder: ParamStore
    decoder: ParamStore
    xi_n: float

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.encoder.flatten(), self.decoder.flatten(),
                               np.array([self.xi_n])])

    @classmethod
    def zeros(cls, model: GenerativeModel) -> "ModelGrads":
        return cls(ParamStore.zeros(model.encoder_spec),
                   ParamStore.zeros(model.decoder_spec), 0.0)


def build_model(variant: str, latent_dim: int, data_dim: int,
                hidden: tuple[int, ...],
                rng: np.random.Generator | None = None) -> GenerativeModel:
    model = GenerativeModel(variant, latent_dim, data_dim,
                            encoder_spec(variant, latent_dim, data_dim, hidden),
                            decoder_spec(latent_dim, data_dim, hidden))
    if rng is not None:
        model.init_params(rng)
    return model


def build_paper_architecture(latent_dim: int, data_dim: int = 784,
                             variant: str = FISHER,
                             rng: np.random.Generator | None = None
                             ) -> GenerativeModel:
    """Full-scale fully-connected layout: three hidden layers of 448 ReLU
    units in encoder and decoder, identity output heads."""
    return build_model(variant, latent_dim, data_dim, PAPER_HIDDEN, rng)
