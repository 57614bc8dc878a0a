"""Dense MLP math with reverse-mode (VJP) and forward-mode (JVP) products,
plus the Adam optimizer.

Conventions, used everywhere in the package:

* float64 only; any NaN/Inf coming out of an operation is an error state.
* batch-first: a batch of n vectors is an (n, d) array, a single vector a
  (d,) array.  Single vectors are accepted and returned squeezed.
* a weight matrix W has shape (fan_in, fan_out) and acts as ``x @ W + b``.
* parameters flatten to one vector in a fixed order: layer index
  ascending, weight matrix row-major, then bias; when a trailing noise
  scalar is present it goes last.  Checkpoints and finite-difference tests
  rely on this order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fishergen import backend
from fishergen.errors import NonFiniteError

ACTIVATIONS = ("identity", "relu")
_ACT_CODE = {"identity": 0, "relu": 1}


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one feed-forward chain.

    widths[0] is the input width, widths[-1] the output width;
    activations[l] applies after the l-th affine layer.
    """

    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need one activation per affine layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def input_width(self) -> int:
        return self.widths[0]

    @property
    def output_width(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def act_codes(self) -> tuple[int, ...]:
        return tuple(_ACT_CODE[a] for a in self.activations)

    def layer_shapes(self):
        """[(W shape, b shape)] per layer."""
        return [((self.widths[l], self.widths[l + 1]), (self.widths[l + 1],))
                for l in range(self.n_layers)]

    def n_params(self) -> int:
        return sum(self.widths[l] * self.widths[l + 1] + self.widths[l + 1]
                   for l in range(self.n_layers))


@dataclass
class ParamStore:
    """Weights and biases of one MLP, optionally with a trailing noise
    scalar (used by the model for the learnable log noise)."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    xi_n: float | None = None

    @classmethod
    def zeros(cls, spec: MlpSpec, xi_n: float | None = None) -> "ParamStore":
        layers = [(np.zeros(w), np.zeros(b)) for w, b in spec.layer_shapes()]
        return cls(layers, xi_n)

    @classmethod
    def glorot(cls, spec: MlpSpec, rng: np.random.Generator,
               xi_n: float | None = None) -> "ParamStore":
        """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases.  Draw
        order is layer-ascending, weights only, so init is reproducible."""
        layers = []
        for (fi, fo), _ in spec.layer_shapes():
            limit = np.sqrt(6.0 / (fi + fo))
            W = rng.uniform(-limit, limit, size=(fi, fo))
            layers.append((W, np.zeros(fo)))
        return cls(layers, xi_n)

    def n_params(self) -> int:
        n = sum(W.size + b.size for W, b in self.layers)
        return n + (1 if self.xi_n is not None else 0)

    def flatten(self) -> np.ndarray:
        """Canonical order: layer ascending, W row-major then b, xi last."""
        parts = []
        for W, b in self.layers:
            parts.append(W.ravel())
            parts.append(b)
        if self.xi_n is not None:
            parts.append(np.array([self.xi_n]))
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, spec: MlpSpec, flat: np.ndarray,
                  has_xi: bool = False) -> "ParamStore":
        flat = np.asarray(flat, dtype=np.float64)
        layers = []
        o = 0
        for (fi, fo), _ in spec.layer_shapes():
            W = flat[o:o + fi * fo].reshape(fi, fo).copy()
            o += fi * fo
            b = flat[o:o + fo].copy()
            o += fo
            layers.append((W, b))
        xi = float(flat[o]) if has_xi else None
        o += 1 if has_xi else 0
        if o != flat.size:
            raise ValueError("flat vector length does not match spec")
        return cls(layers, xi)


@dataclass
class Tape:
    """Per-layer post-activations recorded by :func:`forward`.

    activations[0] is the input, activations[-1] the output; for ReLU
    layers the derivative pattern is activations[l+1] > 0.
    """

    activations: list[np.ndarray]
    squeezed: bool

    @property
    def input(self) -> np.ndarray:
        return self.activations[0]

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def _as_batch(x: np.ndarray, width: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.ascontiguousarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{what} must have width {width}, got shape {x.shape}")
    return x, squeezed


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _layer_arrays(spec: MlpSpec, params: ParamStore):
    if len(params.layers) != spec.n_layers:
        raise ValueError("parameter store does not match spec layer count")
    Ws, bs = [], []
    for (W, b), ((fi, fo), _) in zip(params.layers, spec.layer_shapes()):
        if W.shape != (fi, fo) or b.shape != (fo,):
            raise ValueError(
                f"layer shape mismatch: W{W.shape} b{b.shape} vs spec ({fi},{fo})")
        Ws.append(W)
        bs.append(b)
    return Ws, bs


def forward(spec: MlpSpec, params: ParamStore, x) -> tuple[np.ndarray, Tape]:
    """Evaluate the chain at x; the tape supports vjp/jvp and bit-exact
    replay."""
    xb, squeezed = _as_batch(x, spec.input_width, "input")
    Ws, bs = _layer_arrays(spec, params)
    acts = backend.mlp_forward(Ws, bs, spec.act_codes(), xb)
    y = acts[-1]
    _check_finite(y, "forward output")
    tape = Tape(acts, squeezed)
    return (y[0] if squeezed else y), tape


def replay(spec: MlpSpec, params: ParamStore, tape: Tape) -> np.ndarray:
    """Re-run forward from the tape's recorded input (used to assert the
    tape is a faithful record)."""
    y, _ = forward(spec, params, tape.input)
    return y


def vjp(spec: MlpSpec, params: ParamStore, tape: Tape,
        cotangent) -> tuple[np.ndarray, ParamStore]:
    """Pull a cotangent on the output back to the input and parameters.

    grad_x is J^T @ cotangent at the tape's input; the returned store holds
    the gradients of <cotangent, y> with respect to every W and b (summed
    over the batch).
    """
    ct, ct_squeezed = _as_batch(cotangent, spec.output_width, "cotangent")
    if ct.shape[0] != tape.activations[0].shape[0]:
        raise ValueError("cotangent batch size does not match tape")
    Ws, _ = _layer_arrays(spec, params)
    gx, dWs, dbs = backend.mlp_vjp(Ws, spec.act_codes(), tape.activations,
                                   ct, True)
    grads = ParamStore([(dW, db) for dW, db in zip(dWs, dbs)])
    return (gx[0] if (tape.squeezed and ct_squeezed) else gx), grads


def vjp_input(spec: MlpSpec, params: ParamStore, tape: Tape,
              cotangent) -> np.ndarray:
    """J^T @ cotangent only (no parameter gradients); the cheap half of the
    metric application."""
    ct, ct_squeezed = _as_batch(cotangent, spec.output_width, "cotangent")
    Ws, _ = _layer_arrays(spec, params)
    gx, _, _ = backend.mlp_vjp(Ws, spec.act_codes(), tape.activations,
                               ct, False)
    return gx[0] if (tape.squeezed and ct_squeezed) else gx


def jvp(spec: MlpSpec, params: ParamStore, x, tangent) -> np.ndarray:
    """J @ tangent via a forward dual pass (primal and tangent propagated
    through the same layer chain; exact, not a finite difference)."""
    xb, squeezed = _as_batch(x, spec.input_width, "input")
    tb, _ = _as_batch(tangent, spec.input_width, "tangent")
    if tb.shape[0] != xb.shape[0]:
        raise ValueError("tangent batch size does not match input")
    Ws, bs = _layer_arrays(spec, params)
    acts = backend.mlp_forward(Ws, bs, spec.act_codes(), xb)
    jt = backend.mlp_jvp(Ws, spec.act_codes(), acts, tb)
    _check_finite(jt, "jvp output")
    return jt[0] if squeezed else jt


def jvp_from_tape(spec: MlpSpec, params: ParamStore, tape: Tape,
                  tangent) -> np.ndarray:
    """J @ tangent reusing a recorded forward pass."""
    tb, squeezed = _as_batch(tangent, spec.input_width, "tangent")
    Ws, _ = _layer_arrays(spec, params)
    jt = backend.mlp_jvp(Ws, spec.act_codes(), tape.activations, tb)
    return jt[0] if (tape.squeezed and squeezed) else jt


@dataclass
class AdamState:
    """First/second moment accumulators; step counts the updates taken."""

    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update.  params and state are updated in
    place and returned."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params/grads/state sizes disagree")
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * grads * grads
    mhat = state.m / (1.0 - beta1 ** state.step)
    vhat = state.v / (1.0 - beta2 ** state.step)
    params -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, state
