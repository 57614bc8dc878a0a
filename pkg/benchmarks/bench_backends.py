"""Benchmark: compiled Cython kernels vs the pure-numpy fallback.

Times the individual hot kernels (forward, VJP, fused metric apply), the
batched posterior sampler, and one full training epoch, at desk scale and
at the full fully-connected scale (784-pixel images, 3x448 hidden).

Run:  python benchmarks/bench_backends.py [--quick]
"""

import argparse
import time

import numpy as np

from fishergen import _py_kernels
from fishergen.config import RunConfig
from fishergen.data import SyntheticSpec, make_synthetic_pair
from fishergen.rng import make_rng
from fishergen.training import train

try:
    from fishergen import _kernels as compiled
except ImportError:
    compiled = None


def timeit(fn, repeats):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_kernels(name, widths, n, repeats):
    rng = make_rng(0)
    acts = tuple([1] * (len(widths) - 2) + [0])
    Ws = [rng.standard_normal((i, o)) for i, o in zip(widths, widths[1:])]
    bs = [0.1 * rng.standard_normal(o) for o in widths[1:]]
    X = np.ascontiguousarray(rng.standard_normal((n, widths[0])))
    CT = np.ascontiguousarray(rng.standard_normal((n, widths[-1])))
    V = np.ascontiguousarray(rng.standard_normal((n, widths[0])))

    rows = []
    for label, mod in backends():
        tape = mod.mlp_forward(Ws, bs, acts, X)
        rows.append((label, {
            "forward": timeit(lambda: mod.mlp_forward(Ws, bs, acts, X),
                              repeats),
            "vjp": timeit(lambda: mod.mlp_vjp(Ws, acts, tape, CT, True),
                          repeats),
            "metric_apply": timeit(
                lambda: mod.metric_apply(Ws, acts, tape, V, 1.0), repeats),
        }))
    report(f"{name}  (batch {n}, widths {'x'.join(map(str, widths))})", rows)


def bench_sampler(repeats):
    from fishergen.autodiff import MlpSpec, ParamStore
    from fishergen.fishermetric import MetricOperator, draw_latent_offsets
    import fishergen.backend as backend

    rng = make_rng(1)
    spec = MlpSpec((3, 48, 48, 16), ("relu", "relu", "identity"))
    params = ParamStore.glorot(spec, rng)
    mu = rng.standard_normal((256, 3))

    rows = []
    for label, mod in backends():
        with patched(backend, mod):
            op = MetricOperator(spec, params, mu, 1.0)
            rows.append((label, {
                "sampler_256x3": timeit(
                    lambda: draw_latent_offsets(op, make_rng(2)), repeats),
            }))
    report("posterior sampler (CG over 256 anchors, latent dim 3)", rows)


def bench_epoch(quick):
    import fishergen.backend as backend

    cfg = RunConfig(variant="fisher", latent_dim=3, epochs=1, batch_size=64,
                    learning_rate=1e-3, seed=0, hidden=(48, 48),
                    synthetic=True, synthetic_latent_dim=3,
                    synthetic_data_dim=16,
                    synthetic_train_count=256 if quick else 1024,
                    synthetic_test_count=64).validate()
    tr, te = make_synthetic_pair(
        SyntheticSpec(3, 16, 0.05, cfg.synthetic_train_count, 5), 64)

    rows = []
    for label, mod in backends():
        with patched(backend, mod):
            rows.append((label, {
                "train_epoch": timeit(lambda: train(cfg, tr, test_data=te),
                                      3 if quick else 5),
            }))
    report(f"one training epoch ({cfg.synthetic_train_count} data, "
           "hidden 48x48)", rows)


class patched:
    """Temporarily route the backend module at the given kernel module."""

    def __init__(self, backend, mod):
        self.backend = backend
        self.mod = mod

    def __enter__(self):
        b = self.backend
        self.saved = (b.mlp_forward, b.mlp_vjp, b.mlp_jvp, b.metric_apply,
                      b.cg_metric_solve_batch)
        b.mlp_forward = self.mod.mlp_forward
        b.mlp_vjp = self.mod.mlp_vjp
        b.mlp_jvp = self.mod.mlp_jvp
        b.metric_apply = self.mod.metric_apply
        b.cg_metric_solve_batch = getattr(self.mod, "cg_metric_solve_batch",
                                          None)

    def __exit__(self, *exc):
        (self.backend.mlp_forward, self.backend.mlp_vjp,
         self.backend.mlp_jvp, self.backend.metric_apply,
         self.backend.cg_metric_solve_batch) = self.saved


def backends():
    out = [("python", _py_kernels)]
    if compiled is not None:
        out.insert(0, ("compiled", compiled))
    return out


def report(title, rows):
    print(f"\n== {title}")
    metrics = list(rows[0][1].keys())
    for metric in metrics:
        times = {label: vals[metric] for label, vals in rows}
        line = "  ".join(f"{label}: {t * 1e6:9.1f} us"
                         for label, t in times.items())
        if "compiled" in times and "python" in times:
            line += f"   speedup x{times['python'] / times['compiled']:.2f}"
        print(f"  {metric:<14} {line}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--quick", action="store_true",
                        help="smaller sizes and fewer repeats")
    args = parser.parse_args()
    repeats = 50 if args.quick else 300

    if compiled is None:
        print("note: compiled kernels not built; timing the fallback only")

    bench_kernels("desk-scale decoder", (3, 48, 48, 16), 64, repeats)
    bench_kernels("full-scale decoder", (10, 448, 448, 448, 784), 64,
                  max(10, repeats // 10))
    bench_sampler(max(10, repeats // 10))
    bench_epoch(args.quick)


if __name__ == "__main__":
    main()
