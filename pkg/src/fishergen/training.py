"""The training loop shared by the fisher and vae variants.

One epoch: deterministic shuffled batches, and per batch a posterior
sample per datum (CG-sampled from the inverse metric for the fisher
variant, reparametrized for the vae), the loss with its term breakdown,
hand-derived gradients, and one Adam step.  The parameter update path is
single-threaded and sums in a fixed order, so a (config, seed) pair fully
determines the trajectory.

Each epoch appends one metrics record.  The record always carries the
keys (epoch, loss_total, loss_recon, loss_latent, loss_noise_logdet,
loss_noise_prior, train_mse, seconds); term values are summed over the
epoch's batches so they estimate the full-dataset objective.  When a test
split is supplied, test_mse (deterministic mean-path reconstruction) is
appended; fisher runs also append cg_max_residual and cg_unconverged for
solver health checks.  Wall time (seconds) is the only nondeterministic
field.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from fishergen.autodiff import AdamState, adam_step
from fishergen.config import RunConfig
from fishergen.data import Dataset, batch_iter
from fishergen.errors import NonFiniteError
from fishergen.loss import objective_with_samples
from fishergen.model import FISHER, GenerativeModel, build_model
from fishergen.rng import make_rng


@dataclass
class TrainResult:
    model: GenerativeModel
    adam: AdamState
    rng: np.random.Generator
    metrics: list[dict] = field(default_factory=list)


def reconstruct(model: GenerativeModel, images: np.ndarray,
                chunk: int = 1024) -> np.ndarray:
    """Deterministic mean-path reconstruction f(g(d)) in chunks."""
    outs = []
    for i in range(0, images.shape[0], chunk):
        part = images[i:i + chunk]
        enc = model.encode(part)
        mu = enc if model.variant == FISHER else enc[0]
        outs.append(model.decode(mu))
    return np.concatenate(outs) if outs else np.zeros_like(images)


def mean_path_mse(model: GenerativeModel, dataset: Dataset) -> float:
    recon = reconstruct(model, dataset.images)
    diff = dataset.images - recon
    return float(np.einsum("ij,ij->", diff, diff) / diff.size)


def train_epoch(model: GenerativeModel, dataset: Dataset, config: RunConfig,
                rng: np.random.Generator, adam: AdamState,
                epoch: int) -> dict:
    """Run one epoch and return its metrics record (without timing)."""
    sums = {"loss_total": 0.0, "loss_recon": 0.0, "loss_latent": 0.0,
            "loss_noise_logdet": 0.0, "loss_noise_prior": 0.0}
    sq_sum = 0.0
    cg_max_resid = 0.0
    cg_unconverged = 0
    lr = config.learning_rate * config.lr_decay ** epoch
    for idx in batch_iter(dataset.p, config.batch_size, config.seed, epoch):
        batch = dataset.images[idx]
        breakdown, grads, cg = objective_with_samples(
            model, batch, rng, p_total=dataset.p, cg_tol=config.cg_tol,
            cg_max_iter=config.effective_cg_max_iter())
        adam_step(model.flat, grads.flatten(), adam, lr,
                  config.adam_beta1, config.adam_beta2, config.adam_eps)
        sums["loss_total"] += breakdown.total
        sums["loss_recon"] += breakdown.recon_term
        sums["loss_latent"] += breakdown.latent_term
        sums["loss_noise_logdet"] += breakdown.noise_logdet_term
        sums["loss_noise_prior"] += breakdown.noise_prior_term
        sq_sum += float(breakdown.per_sample_recon.sum())
        if cg is not None:
            cg_max_resid = max(cg_max_resid, cg.max_residual)
            cg_unconverged += int((~cg.converged).sum())
    record = {"epoch": epoch, **sums,
              "train_mse": sq_sum / (dataset.p * dataset.k)}
    if model.variant == FISHER:
        record["cg_max_residual"] = cg_max_resid
        record["cg_unconverged"] = cg_unconverged
    return record


def train(config: RunConfig, dataset: Dataset,
          test_data: Dataset | None = None,
          model: GenerativeModel | None = None,
          adam: AdamState | None = None,
          rng: np.random.Generator | None = None,
          start_epoch: int = 0,
          on_epoch=None) -> TrainResult:
    """Train from scratch or continue from (model, adam, rng, start_epoch)
    as restored from a checkpoint.

    on_epoch, when given, is called after every epoch with
    (epoch, record, model, adam, rng) and is where the CLI hooks metrics
    and checkpoint writing.
    """
    if model is None:
        rng = make_rng(config.seed)
        model = build_model(config.variant, config.latent_dim, dataset.k,
                            config.hidden, rng)
        adam = AdamState.zeros(model.n_params)
    if adam is None or rng is None:
        raise ValueError("resumed training needs model, adam and rng")
    result = TrainResult(model, adam, rng)
    fixed_keys = ("epoch", "loss_total", "loss_recon", "loss_latent",
                  "loss_noise_logdet", "loss_noise_prior", "train_mse")
    for epoch in range(start_epoch, config.epochs):
        started = time.perf_counter()
        raw = train_epoch(model, dataset, config, rng, adam, epoch)
        record = {k: raw[k] for k in fixed_keys}
        record["seconds"] = time.perf_counter() - started
        if test_data is not None:
            record["test_mse"] = mean_path_mse(model, test_data)
        for key in ("cg_max_residual", "cg_unconverged"):
            if key in raw:
                record[key] = raw[key]
        if not np.isfinite(record["loss_total"]):
            raise NonFiniteError(f"training diverged at epoch {epoch}")
        result.metrics.append(record)
        if on_epoch is not None:
            on_epoch(epoch, record, model, adam, rng)
    return result
