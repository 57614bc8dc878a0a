"""Kernel backend selection.

The hot kernels (batched MLP forward, VJP, JVP and the fused metric
application) exist twice: as a Cython extension (``fishergen._kernels``)
and as a pure-numpy fallback (``fishergen._py_kernels``).  The compiled
version is picked when importable; set ``FISHERGEN_BACKEND=python`` or
``=compiled`` to force a choice.  Both backends are deterministic run to
run; their results agree to rounding but are not guaranteed bit-identical
to each other.
"""

import os

from fishergen import _py_kernels

_forced = os.environ.get("FISHERGEN_BACKEND", "").strip().lower()

if _forced not in ("", "compiled", "python"):
    raise ValueError(
        f"FISHERGEN_BACKEND must be 'compiled' or 'python', got {_forced!r}")

if _forced == "python":
    _impl = _py_kernels
    BACKEND = "python"
else:
    try:
        from fishergen import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "compiled"
    except ImportError:
        if _forced == "compiled":
            raise ImportError(
                "FISHERGEN_BACKEND=compiled but fishergen._kernels is not "
                "built; reinstall with a C compiler or unset the variable")
        _impl = _py_kernels
        BACKEND = "python"

mlp_forward = _impl.mlp_forward
mlp_vjp = _impl.mlp_vjp
mlp_jvp = _impl.mlp_jvp
metric_apply = _impl.metric_apply
# fused CG-on-the-metric solver; compiled backend only, None -> generic path
cg_metric_solve_batch = getattr(_impl, "cg_metric_solve_batch", None)
