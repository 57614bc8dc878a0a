"""Pure-numpy batched MLP kernels (fallback backend).

Mirrors the compiled extension ``fishergen._kernels``.  All arrays are
float64 and batch-first: X is (n, width).  Activation codes: 0 identity,
1 ReLU.  The tape passed to the backward/tangent kernels is the list of
post-activations produced by :func:`mlp_forward`; for ReLU layers the
derivative mask is recovered as ``tape[l+1] > 0`` (the derivative at a
pre-activation of exactly 0 is taken to be 0).
"""

from __future__ import annotations

import numpy as np

IDENTITY = 0
RELU = 1


def mlp_forward(Ws, bs, acts, X):
    """Run the affine+activation chain, returning [X, a_1, ..., a_L]."""
    tape = [X]
    a = X
    for W, b, code in zip(Ws, bs, acts):
        z = a @ W
        z += b
        if code == RELU:
            np.maximum(z, 0.0, out=z)
        tape.append(z)
        a = z
    return tape


def mlp_vjp(Ws, acts, tape, cotangent, want_params):
    """Reverse pass from a cotangent on the output.

    Returns (grad_x, dWs, dbs); the parameter gradients are lists of None
    when want_params is false (used for pure J^T products).
    """
    n_layers = len(Ws)
    dWs = [None] * n_layers
    dbs = [None] * n_layers
    delta = cotangent
    for l in range(n_layers - 1, -1, -1):
        if acts[l] == RELU:
            delta = delta * (tape[l + 1] > 0.0)
        if want_params:
            dWs[l] = tape[l].T @ delta
            dbs[l] = delta.sum(axis=0)
        delta = delta @ Ws[l].T
    return delta, dWs, dbs


def mlp_jvp(Ws, acts, tape, tangent):
    """Tangent pass J @ tangent using the ReLU pattern recorded in tape."""
    t = tangent
    for l, W in enumerate(Ws):
        t = t @ W
        if acts[l] == RELU:
            t *= tape[l + 1] > 0.0
    return t


def metric_apply(Ws, acts, tape, V, inv_sigma2):
    """Fused J^T (inv_sigma2 * (J V)) + V at the tape's anchor points."""
    jv = mlp_jvp(Ws, acts, tape, V)
    jv *= inv_sigma2
    g, _, _ = mlp_vjp(Ws, acts, tape, jv, want_params=False)
    return g + V
