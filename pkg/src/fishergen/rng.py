"""Counter-based random number generation.

All stochastic parts of the package draw from numpy Generators backed by
the Philox-4x64-10 bit generator.  Philox is counter-based: its entire
state is a handful of 64-bit words, so it serializes to plain integers and
restores bit-exactly, which is what makes checkpointed runs resumable on
the identical random stream.

Two kinds of streams are used:

* ``make_rng(seed)`` - the main stream of a run (weight init, per-batch
  sampling noise).  Its state is stored in every checkpoint.
* ``stream_rng(seed, stream)`` - stateless side streams keyed by
  ``(seed, stream)``, e.g. one per epoch for batch shuffling, so resuming
  at epoch e reproduces the same shuffles without replaying epochs 0..e-1.
"""

from __future__ import annotations

import numpy as np

# Side-stream ids live in disjoint high-bit ranges so no derived stream can
# collide with the main stream (whose key is [seed, 0]) or with another kind.
SHUFFLE_STREAM_BASE = 1 << 32   # + epoch
SYNTH_COEFF_STREAM = 2 << 32
EVAL_STREAM = 3 << 32
KMEANS_STREAM_BASE = 4 << 32    # + restart index
SAMPLE_STREAM = 5 << 32


def make_rng(seed: int) -> np.random.Generator:
    """Main Philox stream for a run."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent Philox stream keyed by (seed, stream)."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative")
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def rng_state(rng: np.random.Generator) -> dict:
    """Serialize the generator state to JSON-compatible types."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "Philox":
        raise ValueError("only Philox generators are checkpointable")
    return {
        "bit_generator": "Philox",
        "counter": [int(x) for x in st["state"]["counter"]],
        "key": [int(x) for x in st["state"]["key"]],
        "buffer": [int(x) for x in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def restore_rng(state: dict) -> np.random.Generator:
    """Rebuild a generator from :func:`rng_state` output, bit-exactly."""
    if state.get("bit_generator") != "Philox":
        raise ValueError("unsupported generator in checkpoint")
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(state["counter"], dtype=np.uint64),
            "key": np.array(state["key"], dtype=np.uint64),
        },
        "buffer": np.array(state["buffer"], dtype=np.uint64),
        "buffer_pos": state["buffer_pos"],
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }
    return np.random.Generator(bg)
