"""Command-line surface: fishergen train | eval | latent | sample | cluster.

Exit codes: 0 success, 2 configuration/input error, 3 numerical
divergence (non-finite loss or CG breakdown).

Outputs per command:

* train   - <out>/metrics.jsonl (one record per epoch, append-only) and
            <out>/checkpoint.fgn (rewritten atomically each epoch).
* eval    - JSON metrics on stdout (test MSE, sampled-path loss terms,
            frechet proxy of mean-path reconstructions).
* latent  - <out>/latent.csv with header index,label,mu_0..mu_{L-1} and,
            with --eigs/--ellipses, eig_* and vec_i_j columns (vec_i_j is
            component j of the eigenvector for the i-th largest
            eigenvalue); --ellipses also writes <out>/ellipses.csv with
            rows index,n_sigma,point,x,y.
* sample  - <out>/sample_NNNNN.pgm binary greyscale images (P5, maxval
            255) plus the frechet proxy against the test set.
* cluster - <out>/cluster_matrix.csv (row-normalized class-vs-cluster
            fractions after trace-maximizing column permutation) and the
            trace on stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from fishergen import analysis
from fishergen.autodiff import AdamState
from fishergen.checkpoint import load_checkpoint, save_checkpoint
from fishergen.config import RunConfig, load_config
from fishergen.data import Dataset, load_idx, make_synthetic_pair, SyntheticSpec
from fishergen.errors import (CgBreakdownError, ConfigError, IdxFormatError,
                              NonFiniteError)
from fishergen.fishermetric import MetricOperator, draw_latent_offsets
from fishergen.loss import fisher_kl, vae_elbo
from fishergen.model import FISHER, GenerativeModel
from fishergen.rng import (EVAL_STREAM, SAMPLE_STREAM, make_rng, restore_rng,
                           rng_state, stream_rng)
from fishergen.training import reconstruct, train

CHECKPOINT_NAME = "checkpoint.fgn"
METRICS_NAME = "metrics.jsonl"


# -- data plumbing ---------------------------------------------------------

def _synthetic_spec(config: RunConfig) -> SyntheticSpec:
    return SyntheticSpec(latent_dim_true=config.synthetic_latent_dim,
                         data_dim=config.synthetic_data_dim,
                         noise_sigma=config.synthetic_noise,
                         sample_count=config.synthetic_train_count,
                         seed=config.synthetic_seed)


def load_train_test(config: RunConfig) -> tuple[Dataset, Dataset | None]:
    if config.synthetic:
        return make_synthetic_pair(_synthetic_spec(config),
                                   config.synthetic_test_count)
    if not config.train_images or not config.train_labels:
        raise ConfigError("need train_images/train_labels paths "
                          "(or synthetic = true)")
    train_ds = load_idx(config.train_images, config.train_labels)
    test_ds = None
    if config.test_images and config.test_labels:
        test_ds = load_idx(config.test_images, config.test_labels)
    return train_ds, test_ds


def load_test_data(config: RunConfig, args) -> Dataset:
    """Test split for eval-style commands: explicit flags win, then the
    checkpoint's config."""
    images = getattr(args, "test_images", None)
    labels = getattr(args, "test_labels", None)
    if images and labels:
        return load_idx(images, labels)
    if config.synthetic:
        return make_synthetic_pair(_synthetic_spec(config),
                                   config.synthetic_test_count)[1]
    if config.test_images and config.test_labels:
        return load_idx(config.test_images, config.test_labels)
    raise ConfigError("no test data: pass --test-images/--test-labels or "
                      "use a checkpoint whose config has them")


# -- shared evaluation pieces ---------------------------------------------

def sampled_loss(model: GenerativeModel, dataset: Dataset, config: RunConfig,
                 rng: np.random.Generator, chunk: int = 256) -> dict:
    """Full-dataset loss through the variant's sampling path."""
    sums = {"loss_total": 0.0, "loss_recon": 0.0, "loss_latent": 0.0,
            "loss_noise_logdet": 0.0, "loss_noise_prior": 0.0}
    for i in range(0, dataset.p, chunk):
        batch = dataset.images[i:i + chunk]
        if model.variant == FISHER:
            mu = model.encode(batch)
            op = MetricOperator(model.decoder_spec, model.decoder, mu,
                                model.noise_sigma2())
            offsets, _ = draw_latent_offsets(op, rng, config.cg_tol,
                                             config.effective_cg_max_iter())
            bd = fisher_kl(model, batch, mu + offsets, dataset.p)
        else:
            mu, logvar = model.encode(batch)
            eps = rng.standard_normal(mu.shape)
            bd = vae_elbo(model, batch, mu, logvar, eps)
        sums["loss_total"] += bd.total
        sums["loss_recon"] += bd.recon_term
        sums["loss_latent"] += bd.latent_term
        sums["loss_noise_logdet"] += bd.noise_logdet_term
        sums["loss_noise_prior"] += bd.noise_prior_term
    return sums


def proxy_or_none(real: np.ndarray, gen: np.ndarray) -> float | None:
    """Frechet proxy with feat_dim shrunk to what both sets support; None
    when either set is too small for even one feature."""
    feat_dim = min(16, real.shape[1], real.shape[0] - 1, gen.shape[0] - 1)
    if feat_dim < 1:
        return None
    return analysis.frechet_proxy(real, gen, feat_dim)


def metric_eigenpairs(model: GenerativeModel, mu: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of M(mu) per row of mu: (n, L) eigenvalues
    descending and (n, L, L) eigenvector matrices."""
    op = MetricOperator(model.decoder_spec, model.decoder, mu,
                        model.noise_sigma2())
    dense = op.dense()
    n, L = mu.shape
    eigvals = np.empty((n, L))
    eigvecs = np.empty((n, L, L))
    for i in range(n):
        eigvals[i], eigvecs[i] = analysis.eig_sym(dense[i])
    return eigvals, eigvecs


# -- commands --------------------------------------------------------------

def cmd_train(args) -> int:
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        config = ckpt.config
        if args.epochs is not None:
            config.epochs = args.epochs
        if args.out_dir is not None:
            config.out_dir = args.out_dir
        config.validate()
        model, adam = ckpt.model, ckpt.adam
        rng = restore_rng(ckpt.rng_state)
        start_epoch = ckpt.epoch + 1
    else:
        config = load_config(args.config, _config_overrides(args))
        model = adam = rng = None
        start_epoch = 0

    train_ds, test_ds = load_train_test(config)
    os.makedirs(config.out_dir, exist_ok=True)
    metrics_path = os.path.join(config.out_dir, METRICS_NAME)
    ckpt_path = os.path.join(config.out_dir, CHECKPOINT_NAME)

    def on_epoch(epoch, record, model, adam, rng):
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        save_checkpoint(ckpt_path, model, config, adam, epoch,
                        rng_state(rng))

    result = train(config, train_ds, test_data=test_ds, model=model,
                   adam=adam, rng=rng, start_epoch=start_epoch,
                   on_epoch=on_epoch)
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"out_dir": config.out_dir,
                      "epochs_run": len(result.metrics),
                      "final": last}))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, config = ckpt.model, ckpt.config
    test_ds = load_test_data(config, args)
    if test_ds.k != model.data_dim:
        raise ConfigError(f"data dimension {test_ds.k} does not match "
                          f"model ({model.data_dim})")
    recon = reconstruct(model, test_ds.images)
    _, mean_mse = analysis.mse(test_ds.images, recon)
    rng = stream_rng(config.seed, EVAL_STREAM)
    losses = sampled_loss(model, test_ds, config, rng)
    proxy = proxy_or_none(test_ds.images, recon)
    out = {"test_mse": mean_mse, **losses,
           "frechet_proxy_reconstructions": proxy}
    print(json.dumps(out))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(out) + "\n")
    return 0


def cmd_latent(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, config = ckpt.model, ckpt.config
    test_ds = load_test_data(config, args)
    L = model.latent_dim
    with_eigs = args.eigs or args.ellipses
    if args.ellipses and L != 2:
        raise ConfigError("uncertainty ellipses need latent_dim = 2, "
                          f"got {L}")
    os.makedirs(args.out_dir, exist_ok=True)

    enc = model.encode(test_ds.images)
    mu = enc if model.variant == FISHER else enc[0]
    eigvals = eigvecs = None
    if with_eigs:
        eigvals, eigvecs = metric_eigenpairs(model, mu)

    header = ["index", "label"] + [f"mu_{j}" for j in range(L)]
    if with_eigs:
        header += [f"eig_{j}" for j in range(L)]
        header += [f"vec_{i}_{j}" for i in range(L) for j in range(L)]
    latent_path = os.path.join(args.out_dir, "latent.csv")
    with open(latent_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(test_ds.p):
            row = [i, int(test_ds.labels[i])] + [f"{v:.17g}" for v in mu[i]]
            if with_eigs:
                row += [f"{v:.17g}" for v in eigvals[i]]
                row += [f"{eigvecs[i][j, c]:.17g}"
                        for c in range(L) for j in range(L)]
            writer.writerow(row)

    if args.ellipses:
        ellipse_path = os.path.join(args.out_dir, "ellipses.csv")
        with open(ellipse_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "n_sigma", "point", "x", "y"])
            for i in range(test_ds.p):
                rec = analysis.LatentRecord(i, int(test_ds.labels[i]), mu[i],
                                            eigvals[i], eigvecs[i])
                for ns in (1, 2):
                    pts = analysis.uncertainty_ellipse(rec, ns)
                    for j, (x, y) in enumerate(pts):
                        writer.writerow([i, ns, j, f"{x:.17g}", f"{y:.17g}"])

    print(json.dumps({"latent_csv": latent_path, "rows": test_ds.p}))
    return 0


def write_pgm(path, image: np.ndarray, shape: tuple[int, int]) -> None:
    rows, cols = shape
    pix = np.clip(np.rint(np.clip(image, 0.0, 1.0) * 255.0), 0,
                  255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def _image_shape(k: int) -> tuple[int, int]:
    side = int(round(np.sqrt(k)))
    if side * side != k:
        raise ConfigError(f"cannot export non-square data (k = {k}) as PGM")
    return side, side


def read_latent_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """mu matrix and labels from a latent.csv written by cmd_latent."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        mu_cols = [i for i, name in enumerate(header)
                   if name.startswith("mu_")]
        label_col = header.index("label")
        mus, labels = [], []
        for row in reader:
            mus.append([float(row[i]) for i in mu_cols])
            labels.append(int(row[label_col]))
    return np.asarray(mus), np.asarray(labels, dtype=np.int64)


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, config = ckpt.model, ckpt.config
    rng = stream_rng(args.seed if args.seed is not None else config.seed,
                     SAMPLE_STREAM)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.mode == "kde":
        if not args.latent_csv:
            raise ConfigError("kde mode needs --latent-csv (run `fishergen "
                              "latent` first)")
        mus, _ = read_latent_csv(args.latent_csv)
        if mus.shape[1] != model.latent_dim:
            raise ConfigError("latent CSV dimension does not match model")
        kde = analysis.kde_fit(mus)
        z = analysis.kde_sample(kde, args.n, rng)
    else:
        z = rng.standard_normal((args.n, model.latent_dim))

    proxy = None
    written = 0
    if args.n > 0:
        images = np.clip(model.decode(z), 0.0, 1.0)
        shape = _image_shape(model.data_dim)
        for i in range(args.n):
            write_pgm(os.path.join(args.out_dir, f"sample_{i:05d}.pgm"),
                      images[i], shape)
            written += 1
        try:
            test_ds = load_test_data(config, args)
            proxy = proxy_or_none(test_ds.images, images)
        except ConfigError:
            proxy = None
    print(json.dumps({"n": written, "mode": args.mode,
                      "frechet_proxy": proxy, "out_dir": args.out_dir}))
    return 0


def cmd_cluster(args) -> int:
    mus, labels = read_latent_csv(args.latent_csv)
    if args.k > mus.shape[0]:
        raise ConfigError("K exceeds the number of latent rows")
    n_classes = int(labels.max()) + 1 if labels.size else 0
    if args.k != n_classes:
        raise ConfigError(f"K = {args.k} must equal the class count "
                          f"{n_classes} for the trace matrix")
    assignments, _, _ = analysis.kmeans(mus, args.k, args.seed)
    matrix, trace = analysis.cluster_trace(assignments, labels, n_classes)
    os.makedirs(args.out_dir, exist_ok=True)
    matrix_path = os.path.join(args.out_dir, "cluster_matrix.csv")
    with open(matrix_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [f"cluster_{j}" for j in range(args.k)])
        for c in range(n_classes):
            writer.writerow([c] + [f"{v:.17g}" for v in matrix[c]])
    print(json.dumps({"trace": trace, "n_classes": n_classes,
                      "matrix_csv": matrix_path}))
    return 0


# -- argument parsing ------------------------------------------------------

def _config_overrides(args) -> dict:
    names = ("variant", "latent_dim", "epochs", "batch_size",
             "learning_rate", "lr_decay", "seed", "cg_tol", "cg_max_iter",
             "hidden",
             "train_images", "train_labels", "test_images", "test_labels",
             "synthetic", "synthetic_latent_dim", "synthetic_data_dim",
             "synthetic_noise", "synthetic_train_count",
             "synthetic_test_count", "synthetic_seed", "out_dir")
    out = {}
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad hidden widths: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fishergen",
        description="Train and analyze FisherNet / baseline-VAE models")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", default=None, help="key = value config file")
    tr.add_argument("--resume", default=None,
                    help="checkpoint to continue from")
    tr.add_argument("--variant", choices=("fisher", "vae"), default=None)
    tr.add_argument("--latent-dim", dest="latent_dim", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--learning-rate", dest="learning_rate", type=float)
    tr.add_argument("--lr-decay", dest="lr_decay", type=float,
                    help="per-epoch learning-rate decay factor (default 1)")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--cg-tol", dest="cg_tol", type=float)
    tr.add_argument("--cg-max-iter", dest="cg_max_iter", type=int)
    tr.add_argument("--hidden", type=_parse_hidden,
                    help="comma-separated hidden widths, e.g. 448,448,448")
    tr.add_argument("--train-images", dest="train_images")
    tr.add_argument("--train-labels", dest="train_labels")
    tr.add_argument("--test-images", dest="test_images")
    tr.add_argument("--test-labels", dest="test_labels")
    tr.add_argument("--synthetic", action="store_const", const=True,
                    default=None, help="use the synthetic generator")
    tr.add_argument("--synthetic-latent-dim", dest="synthetic_latent_dim",
                    type=int)
    tr.add_argument("--synthetic-data-dim", dest="synthetic_data_dim",
                    type=int)
    tr.add_argument("--synthetic-noise", dest="synthetic_noise", type=float)
    tr.add_argument("--synthetic-train-count", dest="synthetic_train_count",
                    type=int)
    tr.add_argument("--synthetic-test-count", dest="synthetic_test_count",
                    type=int)
    tr.add_argument("--synthetic-seed", dest="synthetic_seed", type=int)
    tr.add_argument("--out-dir", dest="out_dir")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="test-set metrics for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--test-images", dest="test_images")
    ev.add_argument("--test-labels", dest="test_labels")
    ev.add_argument("--out", default=None, help="also write JSON here")
    ev.set_defaults(func=cmd_eval)

    la = sub.add_parser("latent", help="export latent means to CSV")
    la.add_argument("--checkpoint", required=True)
    la.add_argument("--test-images", dest="test_images")
    la.add_argument("--test-labels", dest="test_labels")
    la.add_argument("--eigs", action="store_true",
                    help="include metric eigenpairs")
    la.add_argument("--ellipses", action="store_true",
                    help="also write 1/2-sigma uncertainty ellipses "
                         "(latent_dim = 2 only)")
    la.add_argument("--out-dir", dest="out_dir", default=".")
    la.set_defaults(func=cmd_latent)

    sa = sub.add_parser("sample", help="generate images from the decoder")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--n", type=int, default=64)
    sa.add_argument("--mode", choices=("gaussian", "kde"),
                    default="gaussian")
    sa.add_argument("--latent-csv", dest="latent_csv", default=None)
    sa.add_argument("--seed", type=int, default=None)
    sa.add_argument("--test-images", dest="test_images")
    sa.add_argument("--test-labels", dest="test_labels")
    sa.add_argument("--out-dir", dest="out_dir", default=".")
    sa.set_defaults(func=cmd_sample)

    cl = sub.add_parser("cluster", help="k-means cluster/class trace matrix")
    cl.add_argument("--latent-csv", dest="latent_csv", required=True)
    cl.add_argument("--k", type=int, required=True)
    cl.add_argument("--seed", type=int, default=0)
    cl.add_argument("--out-dir", dest="out_dir", default=".")
    cl.set_defaults(func=cmd_cluster)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IdxFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, CgBreakdownError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 3


def console_entry() -> None:
    sys.exit(main())
