"""Matrix-free latent metric M(mu) = J^T N^-1 J + 1, its CG solver, and
the posterior latent sampler.

J is the decoder Jacobian at the latent anchor mu and N = sigma^2 * 1 is
the learnable isotropic noise covariance.  M is symmetric and satisfies
v^T M v >= v^T v for every v, so it is strictly positive definite and CG
applies; its inverse is the latent posterior covariance, which is never
materialized.

Sampling a zero-mean variate with covariance M^-1 combines two cheap
draws, n* with covariance N^-1 in data space and eta* standard normal in
latent space, into theta* = J^T n* + eta* (covariance M), then solves
M r = theta* with CG; z* = mu + r then has mean mu and covariance M^-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fishergen import backend
from fishergen.autodiff import MlpSpec, ParamStore, _layer_arrays
from fishergen.errors import CgBreakdownError, NonFiniteError

DEFAULT_CG_TOL = 1e-6


def default_max_iter(latent_dim: int) -> int:
    return 5 * latent_dim


@dataclass
class CgReport:
    iterations: int
    final_relative_residual: float
    converged: bool


@dataclass
class BatchCgReport:
    """Per-column CG outcome for a batch of solves."""

    iterations: np.ndarray
    final_relative_residual: np.ndarray
    converged: np.ndarray

    @property
    def max_iterations(self) -> int:
        return int(self.iterations.max(initial=0))

    @property
    def max_residual(self) -> float:
        return float(self.final_relative_residual.max(initial=0.0))

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())


class MetricOperator:
    """v -> J(mu)^T (sigma^-2 * J(mu) v) + v for a batch of anchors.

    mu is (n, L) (a single (L,) anchor is promoted); apply() maps (n, L)
    rows through each row's own metric.  Construction runs one decoder
    forward pass at mu and keeps the tape, so every application costs one
    JVP plus one input-VJP and never forms J.
    """

    def __init__(self, decoder_spec: MlpSpec, decoder_params: ParamStore,
                 mu, sigma2: float):
        if not np.isfinite(sigma2):
            raise NonFiniteError("non-finite noise scale (divergence?)")
        if sigma2 <= 0.0:
            raise ValueError("sigma2 must be positive")
        mu = np.ascontiguousarray(mu, dtype=np.float64)
        self.squeezed = mu.ndim == 1
        if self.squeezed:
            mu = mu.reshape(1, -1)
        if mu.ndim != 2 or mu.shape[1] != decoder_spec.input_width:
            raise ValueError("anchor shape does not match decoder input")
        self.spec = decoder_spec
        self.params = decoder_params
        self.mu = mu
        self.sigma2 = float(sigma2)
        self.inv_sigma2 = 1.0 / float(sigma2)
        Ws, bs = _layer_arrays(decoder_spec, decoder_params)
        self._Ws = Ws
        self._acts = decoder_spec.act_codes()
        self._tape = backend.mlp_forward(Ws, bs, self._acts, mu)
        if not np.all(np.isfinite(self._tape[-1])):
            raise NonFiniteError("non-finite decoder output at metric anchor")

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[1]

    @property
    def data_dim(self) -> int:
        return self.spec.output_width

    def _as_rows(self, v) -> tuple[np.ndarray, bool]:
        v = np.ascontiguousarray(v, dtype=np.float64)
        one = v.ndim == 1
        if one:
            v = v.reshape(1, -1)
        if v.shape != self.mu.shape:
            raise ValueError(f"expected shape {self.mu.shape}, got {v.shape}")
        return v, one

    def apply(self, v) -> np.ndarray:
        """M v, row-wise over the batch."""
        vb, one = self._as_rows(v)
        out = backend.metric_apply(self._Ws, self._acts, self._tape, vb,
                                   self.inv_sigma2)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite metric application")
        return out[0] if one else out

    def jacobian_transpose(self, u) -> np.ndarray:
        """J^T u for data-space rows u (n, k)."""
        u = np.ascontiguousarray(u, dtype=np.float64)
        one = u.ndim == 1
        if one:
            u = u.reshape(1, -1)
        if u.shape != (self.mu.shape[0], self.data_dim):
            raise ValueError("cotangent shape does not match decoder output")
        g, _, _ = backend.mlp_vjp(self._Ws, self._acts, self._tape, u, False)
        return g[0] if one else g

    def dense(self) -> np.ndarray:
        """Explicit per-anchor matrices, (n, L, L) (or (L, L) for a single
        anchor); for eigen-analysis of small latent spaces."""
        n, L = self.mu.shape
        M = np.empty((n, L, L))
        for j in range(L):
            ej = np.zeros((n, L))
            ej[:, j] = 1.0
            M[:, :, j] = self.apply(ej)
        M = 0.5 * (M + np.transpose(M, (0, 2, 1)))
        return M[0] if self.squeezed else M


def cg_solve(matvec, b, tol: float = DEFAULT_CG_TOL,
             max_iter: int | None = None) -> tuple[np.ndarray, CgReport]:
    """Conjugate gradients for one SPD system, zero initial guess.

    Stops when ||b - A x|| <= tol * ||b||; p^T A p <= 0 raises
    CgBreakdownError since it disproves positive definiteness.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ValueError("b must be a vector")
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    if max_iter is None:
        max_iter = default_max_iter(b.size)
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x, CgReport(0, 0.0, True)
    r = b.copy()
    p = b.copy()
    rs = float(r @ r)
    threshold = tol * bnorm
    iterations = 0
    for _ in range(max_iter):
        Ap = np.asarray(matvec(p), dtype=np.float64)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise CgBreakdownError(
                f"p^T A p = {pAp:.3e} <= 0; operator is not SPD")
        alpha = rs / pAp
        x += alpha * p
        r -= alpha * Ap
        iterations += 1
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= threshold:
            rs = rs_new
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    resid = float(np.sqrt(rs) / bnorm)
    return x, CgReport(iterations, resid, resid <= tol)


def cg_solve_batch(matvec, B, tol: float = DEFAULT_CG_TOL,
                   max_iter: int | None = None
                   ) -> tuple[np.ndarray, BatchCgReport]:
    """Row-wise CG: solves A_i x_i = b_i for every row of B through a
    batched matvec.  Each row follows exactly the recurrence it would
    follow alone; converged rows are frozen (their direction vector is
    zeroed so later iterations leave them untouched).
    """
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2:
        raise ValueError("B must be (n, dim)")
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    n, dim = B.shape
    if max_iter is None:
        max_iter = default_max_iter(dim)
    bnorm = np.linalg.norm(B, axis=1)
    X = np.zeros_like(B)
    R = B.copy()
    P = B.copy()
    rs = np.einsum("ij,ij->i", R, R)
    active = bnorm > 0.0
    P[~active] = 0.0
    iterations = np.zeros(n, dtype=np.int64)
    threshold = tol * bnorm
    for _ in range(max_iter):
        if not active.any():
            break
        AP = np.asarray(matvec(P), dtype=np.float64)
        pAp = np.einsum("ij,ij->i", P, AP)
        bad = active & (pAp <= 0.0)
        if bad.any():
            i = int(np.argmax(bad))
            raise CgBreakdownError(
                f"p^T A p = {pAp[i]:.3e} <= 0 in row {i}; operator is not SPD")
        alpha = np.zeros(n)
        alpha[active] = rs[active] / pAp[active]
        X += alpha[:, None] * P
        R -= alpha[:, None] * AP
        iterations[active] += 1
        rs_new = np.einsum("ij,ij->i", R, R)
        done = active & (np.sqrt(rs_new) <= threshold)
        still = active & ~done
        beta = np.zeros(n)
        beta[still] = rs_new[still] / rs[still]
        P = R + beta[:, None] * P
        P[~still] = 0.0
        rs = rs_new
        active = still
    resid = np.zeros(n)
    nz = bnorm > 0.0
    resid[nz] = np.sqrt(rs[nz]) / bnorm[nz]
    return X, BatchCgReport(iterations, resid, resid <= tol)


def metric_solve_batch(op: MetricOperator, B, tol: float = DEFAULT_CG_TOL,
                       max_iter: int | None = None
                       ) -> tuple[np.ndarray, BatchCgReport]:
    """Row-wise CG on a metric operator.  Uses the fused compiled solver
    (identical algorithm, zero per-iteration Python work) when available,
    the generic batched CG otherwise."""
    B = np.ascontiguousarray(B, dtype=np.float64)
    if B.shape != op.mu.shape:
        raise ValueError(f"expected shape {op.mu.shape}, got {B.shape}")
    if max_iter is None:
        max_iter = default_max_iter(op.latent_dim)
    fused = backend.cg_metric_solve_batch
    if fused is None:
        return cg_solve_batch(op.apply, B, tol, max_iter)
    X, iters, resid, converged, breakdown = fused(
        op._Ws, op._acts, op._tape, B, op.inv_sigma2, tol, max_iter)
    if breakdown >= 0:
        raise CgBreakdownError(
            f"p^T A p <= 0 in row {breakdown}; operator is not SPD")
    return X, BatchCgReport(iters, resid, converged)


def draw_latent_offsets(op: MetricOperator, rng: np.random.Generator,
                        tol: float = DEFAULT_CG_TOL,
                        max_iter: int | None = None
                        ) -> tuple[np.ndarray, BatchCgReport]:
    """Zero-mean draws r with covariance M^-1, one per anchor row.

    Draw order from rng (the checkpointed stream): first n* of shape
    (n, data_dim) with per-component variance sigma^-2, then eta* of shape
    (n, latent_dim) standard normal.
    """
    n, L = op.mu.shape
    n_star = rng.standard_normal((n, op.data_dim)) * np.sqrt(op.inv_sigma2)
    eta = rng.standard_normal((n, L))
    theta = op.jacobian_transpose(n_star) + eta
    return metric_solve_batch(op, theta, tol, max_iter)


def draw_latent_samples(op: MetricOperator, rng: np.random.Generator,
                        tol: float = DEFAULT_CG_TOL,
                        max_iter: int | None = None
                        ) -> tuple[np.ndarray, BatchCgReport]:
    """Posterior draws z* = mu + r, one per anchor row; over repeated
    calls z* has mean mu and covariance converging to M^-1."""
    offsets, report = draw_latent_offsets(op, rng, tol, max_iter)
    z = op.mu + offsets
    return (z[0] if op.squeezed else z), report


def draw_latent_sample(op: MetricOperator, rng: np.random.Generator,
                       tol: float = DEFAULT_CG_TOL,
                       max_iter: int | None = None
                       ) -> tuple[np.ndarray, CgReport]:
    """Single-anchor convenience wrapper around draw_latent_samples."""
    if op.mu.shape[0] != 1:
        raise ValueError("draw_latent_sample needs a single-anchor operator")
    z, rep = draw_latent_samples(op, rng, tol, max_iter)
    report = CgReport(int(rep.iterations[0]),
                      float(rep.final_relative_residual[0]),
                      bool(rep.converged[0]))
    return (z if op.squeezed else z[0]), report
