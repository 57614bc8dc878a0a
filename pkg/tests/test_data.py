import gzip
import struct

import numpy as np
import pytest

from fishergen.data import (Dataset, SyntheticSpec, batch_iter, load_idx,
                            make_synthetic, make_synthetic_pair, save_idx,
                            synthetic_map)
from fishergen.errors import IdxFormatError
from fishergen.rng import make_rng


def idx_image_bytes(count, rows, cols, payload):
    return struct.pack(">IIII", 0x00000803, count, rows, cols) + payload


def idx_label_bytes(labels):
    return struct.pack(">II", 0x00000801, len(labels)) + bytes(labels)


def write_pair(tmp_path, img_bytes, lab_bytes):
    ip = tmp_path / "images.idx"
    lp = tmp_path / "labels.idx"
    ip.write_bytes(img_bytes)
    lp.write_bytes(lab_bytes)
    return ip, lp


class TestIdx:
    def test_header_and_dims(self, tmp_path):
        payload = bytes(range(256)) * 6 + bytes(32)  # 2 * 28 * 28 = 1568
        ip, lp = write_pair(tmp_path, idx_image_bytes(2, 28, 28, payload),
                            idx_label_bytes([3, 9]))
        ds = load_idx(ip, lp)
        assert ds.p == 2 and ds.k == 784
        assert list(ds.labels) == [3, 9]
        assert ds.n_classes == 10

    def test_pixel_scaling(self, tmp_path):
        ip, lp = write_pair(tmp_path,
                            idx_image_bytes(1, 1, 2, bytes([255, 0])),
                            idx_label_bytes([0]))
        ds = load_idx(ip, lp)
        assert ds.images[0, 0] == 1.0
        assert ds.images[0, 1] == 0.0

    def test_bad_magic(self, tmp_path):
        bad = struct.pack(">IIII", 0x00000804, 1, 1, 1) + b"\x00"
        ip, lp = write_pair(tmp_path, bad, idx_label_bytes([0]))
        with pytest.raises(IdxFormatError):
            load_idx(ip, lp)

    def test_truncated_payload(self, tmp_path):
        ip, lp = write_pair(tmp_path, idx_image_bytes(2, 2, 2, bytes(7)),
                            idx_label_bytes([0, 1]))
        with pytest.raises(IdxFormatError):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip, lp = write_pair(tmp_path, idx_image_bytes(2, 1, 1, bytes(2)),
                            idx_label_bytes([0]))
        with pytest.raises(IdxFormatError):
            load_idx(ip, lp)

    def test_gzip_transparent(self, tmp_path):
        raw = idx_image_bytes(1, 2, 2, bytes([0, 64, 128, 255]))
        ip = tmp_path / "images.idx.gz"
        ip.write_bytes(gzip.compress(raw))
        lp = tmp_path / "labels.idx"
        lp.write_bytes(idx_label_bytes([1]))
        ds = load_idx(ip, lp)
        assert ds.p == 1 and ds.k == 4
        assert ds.images[0, 3] == 1.0

    def test_round_trip(self, tmp_path, rng):
        images = np.round(rng.random((5, 9)) * 255) / 255.0
        labels = rng.integers(0, 4, size=5)
        ds = Dataset(images, labels, 4)
        ip = tmp_path / "img.idx"
        lp = tmp_path / "lab.idx"
        save_idx(ds, ip, lp)
        back = load_idx(ip, lp)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)


class TestSynthetic:
    def test_zero_noise_residual_is_zero(self):
        spec = SyntheticSpec(latent_dim_true=2, data_dim=8, noise_sigma=0.0,
                             sample_count=50, seed=4)
        ds, z = make_synthetic(spec)
        f = synthetic_map(spec)
        np.testing.assert_array_equal(ds.images, f(z))

    def test_same_seed_bit_identical(self):
        spec = SyntheticSpec(3, 16, 0.05, 64, seed=9)
        a, za = make_synthetic(spec)
        b, zb = make_synthetic(spec)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(za, zb)

    def test_pixel_variance_matches_direct_monte_carlo(self):
        # Var(pixel) ~= Var(f_true(z)) + noise^2; estimate the signal
        # variance by direct sampling of the ground-truth map
        spec = SyntheticSpec(2, 10, noise_sigma=0.05, sample_count=20000,
                             seed=13)
        ds, _ = make_synthetic(spec)
        f = synthetic_map(spec)
        zs = make_rng(555).standard_normal((200000, 2))
        signal_var = f(zs).var(axis=0)
        expected = signal_var + spec.noise_sigma ** 2
        got = ds.images.var(axis=0)
        np.testing.assert_allclose(got, expected, rtol=0.08, atol=2e-4)

    def test_labels_are_sign_quadrants(self):
        spec = SyntheticSpec(2, 8, 0.0, 200, seed=3)
        ds, z = make_synthetic(spec)
        assert ds.n_classes == 4
        expected = (z[:, 0] > 0).astype(int) + 2 * (z[:, 1] > 0).astype(int)
        assert np.array_equal(ds.labels, expected)

    def test_pair_shares_ground_truth_map(self):
        spec = SyntheticSpec(3, 12, 0.0, 100, seed=21)
        train, test = make_synthetic_pair(spec, 40)
        assert train.p == 100 and test.p == 40
        # zero noise: every row of both splits lies on the map's image,
        # whose coordinates stay inside [0.15, 0.85]
        for ds in (train, test):
            assert ds.images.min() >= 0.15 - 1e-12
            assert ds.images.max() <= 0.85 + 1e-12


class TestBatchIter:
    def test_sizes_with_partial_tail(self):
        batches = batch_iter(5, 2, seed=0, epoch=0)
        assert [len(b) for b in batches] == [2, 2, 1]

    def test_same_seed_epoch_identical(self):
        a = batch_iter(100, 7, seed=3, epoch=5)
        b = batch_iter(100, 7, seed=3, epoch=5)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_different_epochs_differ(self):
        a = np.concatenate(batch_iter(100, 10, seed=3, epoch=0))
        b = np.concatenate(batch_iter(100, 10, seed=3, epoch=1))
        assert not np.array_equal(a, b)

    def test_partition_property(self):
        batches = batch_iter(37, 8, seed=1, epoch=2)
        union = np.sort(np.concatenate(batches))
        assert np.array_equal(union, np.arange(37))

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            batch_iter(10, 0, seed=0, epoch=0)
