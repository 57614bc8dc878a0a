"""Training objectives: the FisherNet KL loss with learnable noise, and
the baseline VAE ELBO (fixed unit noise), each with hand-derived
backpropagation through the encoder/decoder chains.

FisherNet, per batch of b data vectors out of a dataset of p, with one
posterior sample z*_i per datum and k = data_dim:

    total = 1/2 * sum_i [ ||z*_i||^2
                          + exp(-xi) * ||d_i - f(z*_i)||^2
                          + k * xi ]
            + 1/2 * (b/p) * xi^2

Constant terms are dropped, so reported losses can be negative.  The
batch weight b/p on the noise prior makes one full epoch accumulate
exactly xi^2/2 once.

Baseline VAE (z_i = mu_i + exp(logvar_i/2) * eps_i, constants dropped):

    total = 1/2 * sum_i [ ||mu_i||^2 + sum_j exp(lv_ij) - sum_j lv_ij
                          + ||d_i - f(z_i)||^2 ]

Gradient flow: the FisherNet sample offset r_i = z*_i - mu_i is treated
as a constant during backpropagation (the metric is taken as locally
constant around the mean), so gradients reach the encoder through mu
only, while the decoder and xi get the reconstruction-path gradients.
The VAE path is the plain reparametrization gradient.  Both
``*_loss_and_grads`` functions therefore differentiate exactly the map
(parameters -> loss at frozen noise), which is what the finite-difference
checks probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fishergen.autodiff import forward, vjp
from fishergen.errors import NonFiniteError
from fishergen.fishermetric import (DEFAULT_CG_TOL, BatchCgReport,
                                    MetricOperator, draw_latent_offsets)
from fishergen.model import FISHER, GenerativeModel, ModelGrads


@dataclass
class LossBreakdown:
    """Scalar objective plus its additive terms.

    per_sample_recon holds the squared residual norms ||d_i - f(z_i)||^2
    (before any noise weighting), from which per-datum MSE is
    per_sample_recon / data_dim.
    """

    total: float
    latent_term: float
    recon_term: float
    noise_logdet_term: float
    noise_prior_term: float
    per_sample_recon: np.ndarray

    def check_finite(self) -> "LossBreakdown":
        vals = (self.total, self.latent_term, self.recon_term,
                self.noise_logdet_term, self.noise_prior_term)
        if not all(np.isfinite(v) for v in vals):
            raise NonFiniteError(f"non-finite loss: {vals}")
        return self


def _as_batch_2d(x, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"expected (n, {width}) batch, got {x.shape}")
    return x


def _empty_breakdown() -> LossBreakdown:
    return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, np.zeros(0))


def _fisher_terms(batch, recon, z_stars, xi: float, b: int,
                  p_total: int) -> LossBreakdown:
    k = batch.shape[1]
    diff = batch - recon
    sq = np.einsum("ij,ij->i", diff, diff)
    latent = 0.5 * float(np.einsum("ij,ij->", z_stars, z_stars))
    recon_term = 0.5 * float(np.exp(-xi) * sq.sum())
    logdet = 0.5 * k * xi * b
    prior = 0.5 * (b / p_total) * xi * xi
    total = latent + recon_term + logdet + prior
    return LossBreakdown(total, latent, recon_term, logdet, prior,
                         sq).check_finite()


def fisher_kl(model: GenerativeModel, batch, z_stars,
              p_total: int) -> LossBreakdown:
    """FisherNet KL objective for a batch, one sampled latent per datum."""
    batch = _as_batch_2d(batch, model.data_dim)
    z_stars = _as_batch_2d(z_stars, model.latent_dim)
    b = batch.shape[0]
    if z_stars.shape[0] != b:
        raise ValueError("need exactly one sampled latent per datum")
    if p_total < b:
        raise ValueError("p_total must be at least the batch size")
    if b == 0:
        return _empty_breakdown()
    recon = model.decode(z_stars)
    return _fisher_terms(batch, recon, z_stars, model.xi_n, b, p_total)


def vae_elbo(model: GenerativeModel, batch, mu, logvar,
             eps_samples) -> LossBreakdown:
    """Baseline ELBO (constants dropped) at z = mu + exp(logvar/2)*eps."""
    batch = _as_batch_2d(batch, model.data_dim)
    mu = _as_batch_2d(mu, model.latent_dim)
    logvar = _as_batch_2d(logvar, model.latent_dim)
    eps = _as_batch_2d(eps_samples, model.latent_dim)
    b = batch.shape[0]
    if not (mu.shape[0] == logvar.shape[0] == eps.shape[0] == b):
        raise ValueError("batch size mismatch between inputs")
    if b == 0:
        return _empty_breakdown()
    z = mu + np.exp(0.5 * logvar) * eps
    recon = model.decode(z)
    diff = batch - recon
    sq = np.einsum("ij,ij->i", diff, diff)
    latent = 0.5 * float((mu * mu).sum() + np.exp(logvar).sum()
                         - logvar.sum())
    recon_term = 0.5 * float(sq.sum())
    total = latent + recon_term
    return LossBreakdown(total, latent, recon_term, 0.0, 0.0,
                         sq).check_finite()


def fisher_loss_and_grads(model: GenerativeModel, batch, z_offsets,
                          p_total: int
                          ) -> tuple[LossBreakdown, ModelGrads]:
    """Loss and parameter gradients with the sample offsets r = z* - mu
    held constant; z* = g(d) + r is recomputed from the current encoder,
    so this is a pure differentiable function of the parameters."""
    batch = _as_batch_2d(batch, model.data_dim)
    z_offsets = _as_batch_2d(z_offsets, model.latent_dim)
    b = batch.shape[0]
    if z_offsets.shape[0] != b:
        raise ValueError("need exactly one sample offset per datum")
    if b == 0:
        return _empty_breakdown(), ModelGrads.zeros(model)

    mu, tape_e = forward(model.encoder_spec, model.encoder, batch)
    z = mu + z_offsets
    recon, tape_d = forward(model.decoder_spec, model.decoder, z)
    xi = model.xi_n
    breakdown = _fisher_terms(batch, recon, z, xi, b, p_total)

    inv_s2 = np.exp(-xi)
    cot_recon = inv_s2 * (recon - batch)
    gz_recon, dec_grads = vjp(model.decoder_spec, model.decoder, tape_d,
                              cot_recon)
    cot_mu = z + gz_recon
    _, enc_grads = vjp(model.encoder_spec, model.encoder, tape_e, cot_mu)
    # d(recon_term)/dxi = -recon_term since recon_term = e^-xi * S / 2
    xi_grad = (-breakdown.recon_term + 0.5 * batch.shape[1] * b
               + (b / p_total) * xi)
    return breakdown, ModelGrads(enc_grads, dec_grads, float(xi_grad))


def vae_loss_and_grads(model: GenerativeModel, batch, eps
                       ) -> tuple[LossBreakdown, ModelGrads]:
    """ELBO and gradients with the exogenous noise eps held constant; the
    reparametrized z keeps full gradient paths through mean and
    log-variance."""
    batch = _as_batch_2d(batch, model.data_dim)
    eps = _as_batch_2d(eps, model.latent_dim)
    b = batch.shape[0]
    if eps.shape[0] != b:
        raise ValueError("need exactly one noise row per datum")
    if b == 0:
        return _empty_breakdown(), ModelGrads.zeros(model)

    head, tape_e = forward(model.encoder_spec, model.encoder, batch)
    L = model.latent_dim
    mu, logvar = head[:, :L], head[:, L:]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    recon, tape_d = forward(model.decoder_spec, model.decoder, z)
    diff = batch - recon
    sq = np.einsum("ij,ij->i", diff, diff)
    latent = 0.5 * float((mu * mu).sum() + np.exp(logvar).sum()
                         - logvar.sum())
    recon_term = 0.5 * float(sq.sum())
    breakdown = LossBreakdown(latent + recon_term, latent, recon_term,
                              0.0, 0.0, sq).check_finite()

    cot_recon = recon - batch
    gz, dec_grads = vjp(model.decoder_spec, model.decoder, tape_d, cot_recon)
    cot_mu = mu + gz
    cot_logvar = 0.5 * (np.exp(logvar) - 1.0) + gz * eps * 0.5 * std
    cot_head = np.concatenate([cot_mu, cot_logvar], axis=1)
    _, enc_grads = vjp(model.encoder_spec, model.encoder, tape_e, cot_head)
    return breakdown, ModelGrads(enc_grads, dec_grads, 0.0)


def backprop_objective(model: GenerativeModel, batch,
                       rng: np.random.Generator, p_total: int | None = None,
                       cg_tol: float = DEFAULT_CG_TOL,
                       cg_max_iter: int | None = None
                       ) -> tuple[LossBreakdown, ModelGrads]:
    """Sample the variant's latents from rng, then differentiate.

    Convenience wrapper over the two-phase path (sampling, then
    loss_and_grads at frozen noise) that the trainer drives directly.
    """
    breakdown, grads, _ = objective_with_samples(model, batch, rng, p_total,
                                                 cg_tol, cg_max_iter)
    return breakdown, grads


def objective_with_samples(model: GenerativeModel, batch,
                           rng: np.random.Generator,
                           p_total: int | None = None,
                           cg_tol: float = DEFAULT_CG_TOL,
                           cg_max_iter: int | None = None
                           ) -> tuple[LossBreakdown, ModelGrads,
                                      BatchCgReport | None]:
    """backprop_objective plus the CG report (None for the VAE path)."""
    batch = _as_batch_2d(batch, model.data_dim)
    b = batch.shape[0]
    if p_total is None:
        p_total = max(b, 1)
    if b == 0:
        return _empty_breakdown(), ModelGrads.zeros(model), None
    if model.variant == FISHER:
        mu = model.encode(batch)
        op = MetricOperator(model.decoder_spec, model.decoder, mu,
                            model.noise_sigma2())
        offsets, report = draw_latent_offsets(op, rng, cg_tol, cg_max_iter)
        breakdown, grads = fisher_loss_and_grads(model, batch, offsets,
                                                 p_total)
        return breakdown, grads, report
    eps = rng.standard_normal((b, model.latent_dim))
    breakdown, grads = vae_loss_and_grads(model, batch, eps)
    return breakdown, grads, None
