"""Binary checkpoints.

Layout (all little-endian):

    bytes 0..3   magic "FGN1"
    u32          format version (currently 1)
    u64          JSON header length in bytes
    ...          JSON header (sorted keys): run config, encoder/decoder
                 specs, epoch counter, optimizer step, serialized RNG
                 state, parameter count
    f64[n]       flat parameters (encoder layers ascending, then decoder
                 layers, each W row-major then b, xi_n last)
    f64[n]       Adam first moments
    f64[n]       Adam second moments

Round-trips are bit-exact: loading and saving again reproduces the file
byte for byte, which is what makes resumed runs continue the identical
trajectory.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from fishergen.autodiff import AdamState, MlpSpec
from fishergen.config import RunConfig
from fishergen.errors import ConfigError
from fishergen.model import GenerativeModel

MAGIC = b"FGN1"
VERSION = 1


@dataclass
class Checkpoint:
    config: RunConfig
    model: GenerativeModel
    adam: AdamState
    epoch: int
    rng_state: dict


def _spec_dict(spec: MlpSpec) -> dict:
    return {"widths": list(spec.widths), "activations": list(spec.activations)}


def _spec_from_dict(d: dict) -> MlpSpec:
    return MlpSpec(tuple(d["widths"]), tuple(d["activations"]))


def save_checkpoint(path, model: GenerativeModel, config: RunConfig,
                    adam: AdamState, epoch: int, rng_state: dict) -> None:
    header = {
        "config": config.to_dict(),
        "variant": model.variant,
        "latent_dim": model.latent_dim,
        "data_dim": model.data_dim,
        "encoder_spec": _spec_dict(model.encoder_spec),
        "decoder_spec": _spec_dict(model.decoder_spec),
        "epoch": epoch,
        "adam_step": adam.step,
        "rng_state": rng_state,
        "n_params": model.n_params,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<Q", len(blob)),
        blob,
        model.flat.astype("<f8").tobytes(),
        adam.m.astype("<f8").tobytes(),
        adam.v.astype("<f8").tobytes(),
    ])
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    hlen = struct.unpack_from("<Q", raw, 8)[0]
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    n = header["n_params"]
    offset = 16 + hlen
    expected = offset + 3 * 8 * n
    if len(raw) != expected:
        raise ConfigError(f"{path}: truncated checkpoint "
                          f"({len(raw)} bytes, expected {expected})")

    def block(i):
        start = offset + i * 8 * n
        return np.frombuffer(raw, dtype="<f8", count=n,
                             offset=start).astype(np.float64)

    config = RunConfig.from_dict(header["config"])
    model = GenerativeModel(header["variant"], header["latent_dim"],
                            header["data_dim"],
                            _spec_from_dict(header["encoder_spec"]),
                            _spec_from_dict(header["decoder_spec"]))
    model.load_flat(block(0))
    adam = AdamState(header["adam_step"], block(1), block(2))
    return Checkpoint(config, model, adam, header["epoch"],
                      header["rng_state"])
