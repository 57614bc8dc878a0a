"""Shared test helpers: relative error with a floor, and central
finite-difference oracles over flattened parameter vectors."""

import numpy as np
import pytest

from fishergen.autodiff import MlpSpec, ParamStore


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_gradient(f, flat: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    flat = np.asarray(flat, dtype=np.float64)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        down = flat.copy()
        down[i] -= h
        grad[i] = (f(up) - f(down)) / (2.0 * h)
    return grad


def naive_mlp_forward(spec: MlpSpec, params: ParamStore,
                      x: np.ndarray) -> np.ndarray:
    """Independent re-implementation of the affine/ReLU chain with plain
    per-neuron loops; deliberately shares no code with the package."""
    a = [float(v) for v in x]
    for (W, b), act in zip(params.layers, spec.activations):
        fan_in, fan_out = W.shape
        out = []
        for j in range(fan_out):
            s = b[j]
            for i in range(fan_in):
                s += a[i] * W[i, j]
            if act == "relu" and s < 0.0:
                s = 0.0
            out.append(s)
        a = out
    return np.array(a)


@pytest.fixture
def rng():
    from fishergen.rng import make_rng
    return make_rng(20240817)
