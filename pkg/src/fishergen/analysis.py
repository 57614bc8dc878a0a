"""Latent-space and sample-quality analyses.

Covers reconstruction MSE, eigen-decomposition of the latent metric for
uncertainty ellipses, k-means with a trace-maximizing cluster/class
matching, Gaussian KDE sampling of the latent distribution, and a
Frechet distance between Gaussian feature summaries.

The Frechet score here is a PCA-feature proxy: both image sets are
projected onto the leading principal components of the real set and the
closed-form Frechet distance between the two feature Gaussians is
returned.  Values are comparable between runs of this proxy only, not to
scores computed on pretrained-network features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from fishergen.rng import KMEANS_STREAM_BASE, stream_rng

MAX_EIG_DIM = 64


@dataclass
class LatentRecord:
    """Per-datum latent summary: mean position, class label, and (when
    computed) the eigenpairs of the local metric, eigenvalues
    descending."""

    index: int
    label: int
    mu: np.ndarray
    eigvals: np.ndarray | None = None
    eigvecs: np.ndarray | None = None


def mse(images, reconstructions) -> tuple[np.ndarray, float]:
    """Per-datum mean squared error over components, and its mean."""
    a = np.asarray(images, dtype=np.float64)
    b = np.asarray(reconstructions, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a = a.reshape(1, -1)
        b = b.reshape(1, -1)
    diff = a - b
    per_datum = np.einsum("ij,ij->i", diff, diff) / a.shape[1]
    return per_datum, float(per_datum.mean())


def eig_sym(A, max_sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
    rotations.

    Sweeps run until the off-diagonal Frobenius norm falls below 1e-12
    relative to the matrix norm.  Returns eigenvalues in descending order
    and the matching orthonormal eigenvectors as columns.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("need a square matrix")
    n = A.shape[0]
    if n > MAX_EIG_DIM:
        raise ValueError(f"dimension {n} exceeds the {MAX_EIG_DIM} limit")
    scale = max(1.0, float(np.abs(A).max(initial=0.0)))
    if float(np.abs(A - A.T).max(initial=0.0)) > 1e-9 * scale:
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (A + A.T)
    V = np.eye(n)
    threshold = 1e-12 * max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        off = a - np.diag(np.diag(a))
        if np.linalg.norm(off) <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        raise RuntimeError("Jacobi sweep limit reached without convergence")
    w = np.diag(a).copy()
    order = np.argsort(w)[::-1]
    return w[order], V[:, order]


def uncertainty_ellipse(record: LatentRecord, n_sigma: float,
                        n_points: int = 64) -> np.ndarray:
    """Closed uncertainty contour around a 2-d latent mean: semi-axis
    n_sigma / sqrt(eigval_i) along eigvec_i, sampled at n_points angles."""
    if record.mu.shape != (2,):
        raise ValueError("uncertainty ellipses need a 2-d latent space")
    if record.eigvals is None or record.eigvecs is None:
        raise ValueError("record has no metric eigenpairs")
    theta = 2.0 * np.pi * np.arange(n_points) / n_points
    semi = n_sigma / np.sqrt(record.eigvals)
    pts = (record.mu[None, :]
           + np.cos(theta)[:, None] * semi[0] * record.eigvecs[:, 0]
           + np.sin(theta)[:, None] * semi[1] * record.eigvecs[:, 1])
    return pts


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int):
    p = points.shape[0]
    pts_sq = np.einsum("ij,ij->i", points, points)
    assign = np.full(p, -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = (pts_sq[:, None] - 2.0 * points @ centers.T
              + np.einsum("ij,ij->i", centers, centers)[None, :])
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(centers.shape[0]):
            mask = assign == k
            if mask.any():
                centers[k] = points[mask].mean(axis=0)
            else:
                # revive an empty cluster at the point worst served by its
                # current center
                dist_own = d2[np.arange(p), assign]
                centers[k] = points[int(np.argmax(dist_own))]
    d2 = (pts_sq[:, None] - 2.0 * points @ centers.T
          + np.einsum("ij,ij->i", centers, centers)[None, :])
    assign = np.argmin(d2, axis=1)
    inertia = float(np.maximum(d2[np.arange(p), assign], 0.0).sum())
    return assign, centers, inertia


def kmeans(points, K: int, seed: int, max_iter: int = 100,
           restarts: int = 10) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm seeded from K distinct data points, best of
    `restarts` runs by inertia."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be (p, dim)")
    p = points.shape[0]
    if not (1 <= K <= p):
        raise ValueError("need 1 <= K <= point count")
    best = None
    for r in range(max(1, restarts)):
        rng = stream_rng(seed, KMEANS_STREAM_BASE + r)
        centers = points[rng.choice(p, size=K, replace=False)].copy()
        assign, centers, inertia = _lloyd(points, centers, max_iter)
        if best is None or inertia < best[2]:
            best = (assign, centers, inertia)
    return best


def cluster_trace(assignments, labels, n_classes: int
                  ) -> tuple[np.ndarray, float]:
    """Row-normalized class-vs-cluster fraction matrix, columns permuted
    to maximize the trace (exact assignment solve), plus that trace."""
    assignments = np.asarray(assignments, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if assignments.shape != labels.shape:
        raise ValueError("assignments and labels must have the same length")
    C = n_classes
    if assignments.size and int(assignments.max()) >= C:
        raise ValueError("more clusters than classes; use K = n_classes")
    counts = np.zeros((C, C))
    np.add.at(counts, (labels, assignments), 1.0)
    row_sums = counts.sum(axis=1, keepdims=True)
    fractions = np.divide(counts, row_sums, out=np.zeros_like(counts),
                          where=row_sums > 0)
    _, perm = linear_sum_assignment(fractions, maximize=True)
    permuted = fractions[:, perm]
    return permuted, float(np.trace(permuted))


@dataclass
class KdeModel:
    """Isotropic Gaussian kernel density over latent support points."""

    points: np.ndarray
    bandwidth: float

    def __post_init__(self):
        if self.bandwidth <= 0.0:
            raise ValueError("bandwidth must be positive")


def kde_fit(means, bandwidth: float | str = "scott") -> KdeModel:
    """Fit the sampler; "scott" sets h = mean per-dimension std times
    p^(-1/(L+4)), with a 0.1 fallback for degenerate supports."""
    pts = np.asarray(means, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("means must be a non-empty (p, L) array")
    if isinstance(bandwidth, str):
        if bandwidth != "scott":
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        p, L = pts.shape
        if p < 2:
            h = 0.1
        else:
            h = float(pts.std(axis=0, ddof=1).mean()) * p ** (-1.0 / (L + 4))
        if not (np.isfinite(h) and h > 0.0):
            h = 0.1
    else:
        h = float(bandwidth)
    return KdeModel(pts, h)


def kde_sample(model: KdeModel, n: int,
               rng: np.random.Generator) -> np.ndarray:
    """Draw n latents: a uniformly chosen support point plus h * N(0, 1)
    noise per dimension."""
    p, L = model.points.shape
    idx = rng.integers(0, p, size=n)
    return model.points[idx] + model.bandwidth * rng.standard_normal((n, L))


def pca_basis(X, feat_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and the leading feat_dim principal directions (rows) of X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be (n, k)")
    n, k = X.shape
    if feat_dim > min(n, k):
        raise ValueError("feat_dim exceeds achievable rank")
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    return mean, vt[:feat_dim]


def _sqrt_psd(C: np.ndarray) -> np.ndarray:
    w, V = eig_sym(C)
    return (V * np.sqrt(np.maximum(w, 0.0))) @ V.T


def frechet_distance_gaussians(mu1, cov1, mu2, cov2) -> float:
    """||mu1-mu2||^2 + tr(C1 + C2 - 2 (C1^1/2 C2 C1^1/2)^1/2), clamped at
    zero against rounding."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    s1 = _sqrt_psd(cov1)
    inner = s1 @ cov2 @ s1
    w, _ = eig_sym(0.5 * (inner + inner.T))
    tr_sqrt = np.sqrt(np.maximum(w, 0.0)).sum()
    d = float(((mu1 - mu2) ** 2).sum() + np.trace(cov1) + np.trace(cov2)
              - 2.0 * tr_sqrt)
    return max(0.0, d)


def _gaussian_summary(F: np.ndarray, ridge: float = 1e-6):
    mu = F.mean(axis=0)
    cov = np.cov(F, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    w, _ = eig_sym(cov)
    if w.min() < 1e-10:
        cov = cov + ridge * np.eye(cov.shape[0])
    return mu, cov


def frechet_proxy(real_images, generated_images, feat_dim: int = 16,
                  basis: tuple[np.ndarray, np.ndarray] | None = None
                  ) -> float:
    """Frechet distance between Gaussian summaries of PCA features.

    The basis is fit on the real set unless one is supplied; both sets
    need at least feat_dim + 1 images so the feature covariances have
    full rank (a 1e-6 ridge covers near-deficiency)."""
    real = np.asarray(real_images, dtype=np.float64)
    gen = np.asarray(generated_images, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ValueError("image sets must be (n, k) with matching k")
    if real.shape[0] < feat_dim + 1 or gen.shape[0] < feat_dim + 1:
        raise ValueError("each set needs at least feat_dim + 1 images")
    if basis is None:
        basis = pca_basis(real, feat_dim)
    mean, comps = basis
    f_real = (real - mean) @ comps.T
    f_gen = (gen - mean) @ comps.T
    mu1, c1 = _gaussian_summary(f_real)
    mu2, c2 = _gaussian_summary(f_gen)
    return frechet_distance_gaussians(mu1, c1, mu2, c2)
