import json
import shutil

import numpy as np
import pytest

from fishergen import analysis
from fishergen.checkpoint import load_checkpoint, save_checkpoint
from fishergen.cli import main, read_latent_csv
from fishergen.config import RunConfig
from fishergen.data import SyntheticSpec, make_synthetic_pair
from fishergen.model import FISHER, build_model
from fishergen.rng import make_rng, rng_state
from fishergen.training import reconstruct

BASE_FLAGS = ["--synthetic", "--synthetic-latent-dim", "2",
              "--synthetic-data-dim", "16", "--synthetic-noise", "0.05",
              "--synthetic-train-count", "128",
              "--synthetic-test-count", "64", "--synthetic-seed", "7",
              "--hidden", "12", "--latent-dim", "2", "--batch-size", "32",
              "--learning-rate", "0.001", "--seed", "11"]


def run_train(out_dir, epochs=2, extra=()):
    argv = ["train", *BASE_FLAGS, "--epochs", str(epochs),
            "--out-dir", str(out_dir), *extra]
    return main(argv)


def read_metrics(out_dir):
    with open(out_dir / "metrics.jsonl", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert run_train(out, epochs=2) == 0
    return out


def strip_seconds(rec):
    return {k: v for k, v in rec.items() if k != "seconds"}


class TestTrainCommand:
    def test_outputs_exist_with_schema(self, trained):
        records = read_metrics(trained)
        assert len(records) == 2
        keys = list(records[0].keys())
        assert keys[:8] == ["epoch", "loss_total", "loss_recon",
                            "loss_latent", "loss_noise_logdet",
                            "loss_noise_prior", "train_mse", "seconds"]
        ckpt = load_checkpoint(trained / "checkpoint.fgn")
        assert ckpt.epoch == 1
        assert ckpt.config.latent_dim == 2

    def test_deterministic_across_runs(self, tmp_path):
        out = tmp_path / "run"
        assert run_train(out, epochs=1) == 0
        metrics_a = read_metrics(out)
        ckpt_a = (out / "checkpoint.fgn").read_bytes()
        shutil.rmtree(out)
        assert run_train(out, epochs=1) == 0
        metrics_b = read_metrics(out)
        ckpt_b = (out / "checkpoint.fgn").read_bytes()
        assert [strip_seconds(r) for r in metrics_a] \
            == [strip_seconds(r) for r in metrics_b]
        assert ckpt_a == ckpt_b

    def test_resume_matches_uninterrupted(self, tmp_path):
        full = tmp_path / "full"
        assert run_train(full, epochs=3) == 0
        split = tmp_path / "split"
        assert run_train(split, epochs=2) == 0
        assert main(["train", "--resume", str(split / "checkpoint.fgn"),
                     "--epochs", "3"]) == 0
        a = load_checkpoint(full / "checkpoint.fgn")
        b = load_checkpoint(split / "checkpoint.fgn")
        # identical trajectory: parameters, optimizer state and RNG agree
        # bitwise (the config snapshots differ in out_dir only)
        assert np.array_equal(a.model.flatten(), b.model.flatten())
        assert np.array_equal(a.adam.m, b.adam.m)
        assert np.array_equal(a.adam.v, b.adam.v)
        assert a.adam.step == b.adam.step
        assert a.rng_state == b.rng_state
        assert a.epoch == b.epoch == 2
        full_recs = read_metrics(full)
        split_recs = read_metrics(split)
        assert strip_seconds(full_recs[2]) == strip_seconds(split_recs[2])

    def test_divergence_exit_code(self, tmp_path):
        out = tmp_path / "diverge"
        code = run_train(out, epochs=3,
                         extra=["--learning-rate", "1e12"])
        assert code == 3

    def test_bad_config_exit_code(self, tmp_path):
        assert main(["train", "--latent-dim", "0",
                     "--out-dir", str(tmp_path / "x")]) == 2

    def test_missing_data_paths_exit_code(self, tmp_path):
        assert main(["train", "--out-dir", str(tmp_path / "y")]) == 2


class TestEvalCommand:
    def test_runs_and_repeats(self, trained, capsys):
        ckpt = str(trained / "checkpoint.fgn")
        assert main(["eval", "--checkpoint", ckpt]) == 0
        first = json.loads(capsys.readouterr().out)
        assert main(["eval", "--checkpoint", ckpt]) == 0
        second = json.loads(capsys.readouterr().out)
        assert first == second
        for key in ("test_mse", "loss_total",
                    "frechet_proxy_reconstructions"):
            assert key in first

    def test_mse_matches_manual_reconstructions(self, trained, capsys):
        ckpt_path = trained / "checkpoint.fgn"
        assert main(["eval", "--checkpoint", str(ckpt_path)]) == 0
        reported = json.loads(capsys.readouterr().out)["test_mse"]
        ckpt = load_checkpoint(ckpt_path)
        cfg = ckpt.config
        _, test_ds = make_synthetic_pair(
            SyntheticSpec(cfg.synthetic_latent_dim, cfg.synthetic_data_dim,
                          cfg.synthetic_noise, cfg.synthetic_train_count,
                          cfg.synthetic_seed), cfg.synthetic_test_count)
        recon = reconstruct(ckpt.model, test_ds.images)
        _, manual = analysis.mse(test_ds.images, recon)
        assert abs(reported - manual) <= 1e-12

    def test_untrained_zero_model_mse_is_variance_around_bias(
            self, tmp_path, capsys):
        # zero weights: the reconstruction is the constant decoder bias,
        # so the MSE equals the mean squared deviation from that constant
        cfg = RunConfig(latent_dim=2, hidden=(4,), synthetic=True,
                        synthetic_data_dim=9, synthetic_latent_dim=2,
                        synthetic_train_count=32, synthetic_test_count=64,
                        seed=1).validate()
        model = build_model(FISHER, 2, 9, (4,))
        model.decoder.layers[-1][1][...] = 0.5
        from fishergen.autodiff import AdamState
        path = tmp_path / "zero.fgn"
        save_checkpoint(path, model, cfg, AdamState.zeros(model.n_params),
                        0, rng_state(make_rng(1)))
        assert main(["eval", "--checkpoint", str(path)]) == 0
        reported = json.loads(capsys.readouterr().out)["test_mse"]
        _, test_ds = make_synthetic_pair(
            SyntheticSpec(2, 9, cfg.synthetic_noise,
                          cfg.synthetic_train_count, cfg.synthetic_seed),
            64)
        expected = float(((test_ds.images - 0.5) ** 2).mean())
        assert abs(reported - expected) <= 1e-12


class TestLatentCommand:
    def test_csv_rows_and_eig_floor(self, trained, tmp_path, capsys):
        out = tmp_path / "latent"
        assert main(["latent", "--checkpoint",
                     str(trained / "checkpoint.fgn"), "--ellipses",
                     "--out-dir", str(out)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["rows"] == 64
        with open(out / "latent.csv", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            rows = [line.strip().split(",") for line in fh]
        assert header[:4] == ["index", "label", "mu_0", "mu_1"]
        assert "eig_0" in header and "vec_1_1" in header
        assert len(rows) == 64
        eig_cols = [header.index("eig_0"), header.index("eig_1")]
        for row in rows:
            for c in eig_cols:
                assert float(row[c]) >= 1.0 - 1e-6
        assert (out / "ellipses.csv").exists()

    def test_first_row_reproduces_encoder(self, trained, tmp_path):
        out = tmp_path / "latent2"
        assert main(["latent", "--checkpoint",
                     str(trained / "checkpoint.fgn"),
                     "--out-dir", str(out)]) == 0
        mus, labels = read_latent_csv(out / "latent.csv")
        ckpt = load_checkpoint(trained / "checkpoint.fgn")
        cfg = ckpt.config
        _, test_ds = make_synthetic_pair(
            SyntheticSpec(cfg.synthetic_latent_dim, cfg.synthetic_data_dim,
                          cfg.synthetic_noise, cfg.synthetic_train_count,
                          cfg.synthetic_seed), cfg.synthetic_test_count)
        mu0 = ckpt.model.encode(test_ds.images[0])
        np.testing.assert_allclose(mus[0], mu0, rtol=0, atol=0)
        assert labels[0] == test_ds.labels[0]

    def test_ellipses_need_two_dims(self, tmp_path):
        cfg = RunConfig(latent_dim=3, hidden=(4,), synthetic=True,
                        synthetic_data_dim=9).validate()
        model = build_model(FISHER, 3, 9, (4,), make_rng(2))
        from fishergen.autodiff import AdamState
        path = tmp_path / "l3.fgn"
        save_checkpoint(path, model, cfg, AdamState.zeros(model.n_params),
                        0, rng_state(make_rng(2)))
        assert main(["latent", "--checkpoint", str(path), "--ellipses",
                     "--out-dir", str(tmp_path)]) == 2


class TestSampleCommand:
    def test_pgm_header_and_count(self, trained, tmp_path, capsys):
        out = tmp_path / "samples"
        assert main(["sample", "--checkpoint",
                     str(trained / "checkpoint.fgn"), "--n", "3",
                     "--out-dir", str(out)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["n"] == 3
        assert info["frechet_proxy"] is not None
        files = sorted(out.glob("*.pgm"))
        assert len(files) == 3
        raw = files[0].read_bytes()
        assert raw.startswith(b"P5\n4 4\n255\n")
        assert len(raw) == len(b"P5\n4 4\n255\n") + 16

    def test_zero_samples_no_files(self, trained, tmp_path, capsys):
        out = tmp_path / "empty"
        assert main(["sample", "--checkpoint",
                     str(trained / "checkpoint.fgn"), "--n", "0",
                     "--out-dir", str(out)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["n"] == 0
        assert info["frechet_proxy"] is None
        assert list(out.glob("*.pgm")) == []

    def test_kde_mode_needs_latent_csv(self, trained, tmp_path):
        assert main(["sample", "--checkpoint",
                     str(trained / "checkpoint.fgn"), "--mode", "kde",
                     "--out-dir", str(tmp_path)]) == 2

    def test_kde_mode_runs(self, trained, tmp_path, capsys):
        latent_dir = tmp_path / "latent"
        assert main(["latent", "--checkpoint",
                     str(trained / "checkpoint.fgn"),
                     "--out-dir", str(latent_dir)]) == 0
        capsys.readouterr()
        out = tmp_path / "kde"
        assert main(["sample", "--checkpoint",
                     str(trained / "checkpoint.fgn"), "--mode", "kde",
                     "--latent-csv", str(latent_dir / "latent.csv"),
                     "--n", "20", "--out-dir", str(out)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["mode"] == "kde" and info["n"] == 20


class TestClusterCommand:
    def test_separable_labels_reach_full_trace(self, tmp_path, capsys):
        # lay out four tight blobs and label them by blob
        rng = make_rng(3)
        centers = np.array([[4.0, 4.0], [-4.0, 4.0], [-4.0, -4.0],
                            [4.0, -4.0]])
        mus = np.vstack([c + 0.05 * rng.standard_normal((25, 2))
                         for c in centers])
        labels = np.repeat(np.arange(4), 25)
        csv_path = tmp_path / "latent.csv"
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("index,label,mu_0,mu_1\n")
            for i, (mu, lab) in enumerate(zip(mus, labels)):
                fh.write(f"{i},{lab},{mu[0]},{mu[1]}\n")
        assert main(["cluster", "--latent-csv", str(csv_path), "--k", "4",
                     "--out-dir", str(tmp_path)]) == 0
        info = json.loads(capsys.readouterr().out)
        assert abs(info["trace"] - 4.0) <= 1e-9
        with open(tmp_path / "cluster_matrix.csv", encoding="utf-8") as fh:
            fh.readline()
            rows = [[float(v) for v in line.split(",")[1:]] for line in fh]
        for row in rows:
            assert abs(sum(row) - 1.0) <= 1e-9

    def test_k_must_match_classes(self, tmp_path):
        csv_path = tmp_path / "latent.csv"
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("index,label,mu_0,mu_1\n0,0,0.0,0.0\n1,1,1.0,1.0\n")
        assert main(["cluster", "--latent-csv", str(csv_path), "--k", "5",
                     "--out-dir", str(tmp_path)]) == 2
