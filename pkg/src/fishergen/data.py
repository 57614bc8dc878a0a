"""Dataset ingestion and generation.

Two sources: IDX files (the Fashion-MNIST distribution format) and a
synthetic generator with a known smooth ground-truth map, used for
desk-scale verification where the exact noise floor is known.

IDX layout (big-endian): u32 magic 0x00000803 for images / 0x00000801 for
labels, then one u32 per dimension (count, rows, cols for images; count
for labels), then the raw unsigned bytes.  Pixels are scaled to [0, 1] by
1/255.  Gzip-compressed files are detected by their two magic bytes and
decompressed transparently.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from fishergen.errors import IdxFormatError
from fishergen.rng import (SHUFFLE_STREAM_BASE, SYNTH_COEFF_STREAM, make_rng,
                           stream_rng)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """p data vectors of dimension k in [0, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2:
            raise ValueError("images must be a (p, k) array")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("need exactly one label per image")
        if self.images.size and (self.images.min() < 0.0
                                 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def p(self) -> int:
        return self.images.shape[0]

    @property
    def k(self) -> int:
        return self.images.shape[1]


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def _parse_header(raw: bytes, magic: int, n_dims: int, path) -> tuple:
    need = 4 + 4 * n_dims
    if len(raw) < need:
        raise IdxFormatError(f"{path}: truncated IDX header")
    got = struct.unpack_from(">I", raw, 0)[0]
    if got != magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{n_dims}I", raw, 4)
    return dims, raw[need:]


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an images/labels IDX pair into a Dataset."""
    dims, payload = _parse_header(_read_bytes(images_path), IMAGES_MAGIC,
                                  3, images_path)
    p, rows, cols = dims
    k = rows * cols
    if len(payload) < p * k:
        raise IdxFormatError(f"{images_path}: truncated image payload "
                             f"({len(payload)} bytes, need {p * k})")
    images = np.frombuffer(payload[:p * k], dtype=np.uint8)
    images = images.reshape(p, k).astype(np.float64) / 255.0

    ldims, lpayload = _parse_header(_read_bytes(labels_path), LABELS_MAGIC,
                                    1, labels_path)
    if ldims[0] != p:
        raise IdxFormatError(
            f"label count {ldims[0]} does not match image count {p}")
    if len(lpayload) < p:
        raise IdxFormatError(f"{labels_path}: truncated label payload")
    labels = np.frombuffer(lpayload[:p], dtype=np.uint8).astype(np.int64)
    n_classes = int(labels.max()) + 1 if p else 0
    return Dataset(images, labels, n_classes)


def save_idx(ds: Dataset, images_path, labels_path,
             image_shape: tuple[int, int] | None = None) -> None:
    """Inverse of load_idx; pixels are quantized back to bytes by
    round(value * 255)."""
    if image_shape is None:
        side = int(round(np.sqrt(ds.k)))
        if side * side != ds.k:
            raise ValueError("non-square data needs an explicit image_shape")
        image_shape = (side, side)
    rows, cols = image_shape
    if rows * cols != ds.k:
        raise ValueError("image_shape does not match data dimension")
    pix = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, ds.p, rows, cols))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, ds.p))
        fh.write(ds.labels.astype(np.uint8).tobytes())


@dataclass(frozen=True)
class SyntheticSpec:
    """Known-truth generator settings: standard-normal latents pushed
    through a fixed smooth map plus isotropic pixel noise."""

    latent_dim_true: int = 3
    data_dim: int = 16
    noise_sigma: float = 0.05
    sample_count: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim_true < 1 or self.data_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be non-negative")
        if self.sample_count < 0:
            raise ValueError("sample_count must be non-negative")


# frequency scale of the ground-truth map; 0.6 keeps the sine coordinates
# smooth enough that desk-scale decoders can fit them to the noise floor
FREQ_SCALE = 0.6


def _synthetic_coefficients(spec: SyntheticSpec):
    rng = stream_rng(spec.seed, SYNTH_COEFF_STREAM)
    freqs = FREQ_SCALE * rng.standard_normal((spec.data_dim,
                                              spec.latent_dim_true))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.data_dim)
    return freqs, phases


def synthetic_map(spec: SyntheticSpec):
    """The deterministic ground-truth map z -> clean data vector; each
    coordinate is 0.5 + 0.35 * sin(<a_j, z> + phi_j) with seeded a, phi,
    so the clean signal always lies inside [0.15, 0.85]."""
    freqs, phases = _synthetic_coefficients(spec)

    def f_true(z):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        zz = z.reshape(1, -1) if single else z
        out = 0.5 + 0.35 * np.sin(zz @ freqs.T + phases)
        return out[0] if single else out

    return f_true


def synthetic_labels(true_latents: np.ndarray) -> tuple[np.ndarray, int]:
    """Sign-quadrant classes over the first two (or one) latent axes."""
    bits = min(2, true_latents.shape[1])
    labels = np.zeros(true_latents.shape[0], dtype=np.int64)
    for j in range(bits):
        labels += (true_latents[:, j] > 0.0).astype(np.int64) << j
    return labels, 1 << bits


def make_synthetic(spec: SyntheticSpec) -> tuple[Dataset, np.ndarray]:
    """Draw a dataset d = f_true(z) + noise (clipped to [0, 1]) with the
    generating latents returned for ground-truth checks."""
    f_true = synthetic_map(spec)
    rng = make_rng(spec.seed)
    z = rng.standard_normal((spec.sample_count, spec.latent_dim_true))
    clean = f_true(z)
    noisy = clean + spec.noise_sigma * rng.standard_normal(clean.shape)
    images = np.clip(noisy, 0.0, 1.0)
    labels, n_classes = synthetic_labels(z)
    return Dataset(images, labels, n_classes), z


def make_synthetic_pair(spec: SyntheticSpec, test_count: int
                        ) -> tuple[Dataset, Dataset]:
    """Train/test splits from one stream and one ground-truth map;
    spec.sample_count is the train size."""
    f_true = synthetic_map(spec)
    rng = make_rng(spec.seed)
    total = spec.sample_count + test_count
    z = rng.standard_normal((total, spec.latent_dim_true))
    clean = f_true(z)
    noisy = clean + spec.noise_sigma * rng.standard_normal(clean.shape)
    images = np.clip(noisy, 0.0, 1.0)
    labels, n_classes = synthetic_labels(z)
    cut = spec.sample_count
    train = Dataset(images[:cut], labels[:cut], n_classes)
    test = Dataset(images[cut:], labels[cut:], n_classes)
    return train, test


def batch_iter(p: int, batch_size: int, seed: int, epoch: int):
    """Deterministic shuffled batches for one epoch: a permutation keyed
    by (seed, epoch) cut into batch_size chunks, last partial chunk kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = stream_rng(seed, SHUFFLE_STREAM_BASE + epoch).permutation(p)
    return [perm[i:i + batch_size] for i in range(0, p, batch_size)]
