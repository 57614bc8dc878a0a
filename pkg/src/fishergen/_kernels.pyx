# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled batched MLP kernels (the training hot path).

Same contract as fishergen._py_kernels: float64 C-contiguous batch-first
arrays, activation codes 0 identity / 1 ReLU, tape = list of
post-activations.  Affine products go through BLAS dgemm; bias addition
and activation masking are fused C loops, so a whole forward / backward /
tangent sweep runs without touching the Python interpreter per layer
element.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm


cdef void _gemm_nn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C,
                   double alpha, double beta) noexcept nogil:
    """Row-major C(m,n) = alpha * A(m,k) @ B(k,n) + beta * C."""
    cdef int m = <int> A.shape[0]
    cdef int k = <int> A.shape[1]
    cdef int n = <int> B.shape[1]
    cdef char cn = b'N'
    if m == 0 or n == 0:
        return
    dgemm(&cn, &cn, &n, &m, &k, &alpha, &B[0, 0], &n, &A[0, 0], &k,
          &beta, &C[0, 0], &n)


cdef void _gemm_tn(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C,
                   double alpha, double beta) noexcept nogil:
    """Row-major C(p,n) = alpha * A(m,p)^T @ B(m,n) + beta * C."""
    cdef int m = <int> A.shape[0]
    cdef int p = <int> A.shape[1]
    cdef int n = <int> B.shape[1]
    cdef char cn = b'N'
    cdef char ct = b'T'
    if p == 0 or n == 0:
        return
    dgemm(&cn, &ct, &n, &p, &m, &alpha, &B[0, 0], &n, &A[0, 0], &p,
          &beta, &C[0, 0], &n)


cdef void _gemm_nt(double[:, ::1] A, double[:, ::1] B, double[:, ::1] C,
                   double alpha, double beta) noexcept nogil:
    """Row-major C(m,p) = alpha * A(m,n) @ B(p,n)^T + beta * C."""
    cdef int m = <int> A.shape[0]
    cdef int n = <int> A.shape[1]
    cdef int p = <int> B.shape[0]
    cdef char cn = b'N'
    cdef char ct = b'T'
    if m == 0 or p == 0:
        return
    dgemm(&ct, &cn, &p, &m, &n, &alpha, &B[0, 0], &n, &A[0, 0], &n,
          &beta, &C[0, 0], &p)


cdef void _bias_act(double[:, ::1] Z, double[::1] b, int relu) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double v
    if relu:
        for i in range(Z.shape[0]):
            for j in range(Z.shape[1]):
                v = Z[i, j] + b[j]
                Z[i, j] = v if v > 0.0 else 0.0
    else:
        for i in range(Z.shape[0]):
            for j in range(Z.shape[1]):
                Z[i, j] += b[j]


cdef void _mask_from(double[:, ::1] T, double[:, ::1] act) noexcept nogil:
    # zero T where the recorded post-activation is not strictly positive
    # (branchless: the comparison promotes to 0.0/1.0)
    cdef Py_ssize_t i, j
    for i in range(T.shape[0]):
        for j in range(T.shape[1]):
            T[i, j] *= act[i, j] > 0.0


cdef void _scale(double[:, ::1] T, double factor) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(T.shape[0]):
        for j in range(T.shape[1]):
            T[i, j] *= factor


cdef void _add_into(double[:, ::1] T, double[:, ::1] other) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(T.shape[0]):
        for j in range(T.shape[1]):
            T[i, j] += other[i, j]


cdef void _col_sums(double[:, ::1] T, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    for j in range(T.shape[1]):
        out[j] = 0.0
    for i in range(T.shape[0]):
        for j in range(T.shape[1]):
            out[j] += T[i, j]


def mlp_forward(Ws, bs, acts, X):
    """Run the affine+activation chain, returning [X, a_1, ..., a_L]."""
    cdef double[:, ::1] a = X
    cdef double[:, ::1] z
    cdef Py_ssize_t n = X.shape[0]
    tape = [X]
    for l in range(len(Ws)):
        W = Ws[l]
        out = np.empty((n, W.shape[1]))
        z = out
        _gemm_nn(a, W, z, 1.0, 0.0)
        _bias_act(z, bs[l], 1 if acts[l] == 1 else 0)
        tape.append(out)
        a = z
    return tape


def mlp_vjp(Ws, acts, tape, cotangent, want_params):
    """Reverse pass from a cotangent on the output; see _py_kernels."""
    cdef Py_ssize_t n_layers = len(Ws)
    cdef Py_ssize_t n = cotangent.shape[0]
    cdef double[:, ::1] delta
    cdef double[:, ::1] prev
    dWs = [None] * n_layers
    dbs = [None] * n_layers
    cur = np.array(cotangent, copy=True)
    delta = cur
    for l in range(n_layers - 1, -1, -1):
        if acts[l] == 1:
            _mask_from(delta, tape[l + 1])
        W = Ws[l]
        if want_params:
            dW = np.empty((W.shape[0], W.shape[1]))
            db = np.empty(W.shape[1])
            _gemm_tn(tape[l], cur, dW, 1.0, 0.0)
            _col_sums(delta, db)
            dWs[l] = dW
            dbs[l] = db
        nxt = np.empty((n, W.shape[0]))
        prev = nxt
        _gemm_nt(cur, W, prev, 1.0, 0.0)
        cur = nxt
        delta = prev
    return cur, dWs, dbs


def mlp_jvp(Ws, acts, tape, tangent):
    """Tangent pass J @ tangent using the ReLU pattern recorded in tape."""
    cdef Py_ssize_t n = tangent.shape[0]
    cdef double[:, ::1] t = tangent
    cdef double[:, ::1] nxt
    cur = tangent
    for l in range(len(Ws)):
        W = Ws[l]
        out = np.empty((n, W.shape[1]))
        nxt = out
        _gemm_nn(t, W, nxt, 1.0, 0.0)
        if acts[l] == 1:
            _mask_from(nxt, tape[l + 1])
        cur = out
        t = nxt
    return cur


def metric_apply(Ws, acts, tape, V, inv_sigma2):
    """Fused J^T (inv_sigma2 * (J V)) + V at the tape's anchor points."""
    jv = mlp_jvp(Ws, acts, tape, V)
    cdef double[:, ::1] jv_view = jv
    _scale(jv_view, inv_sigma2)
    g, _, _ = mlp_vjp(Ws, acts, tape, jv, want_params=False)
    cdef double[:, ::1] g_view = g
    _add_into(g_view, V)
    return g


# -- fused metric CG -------------------------------------------------------

from libc.math cimport sqrt

DEF MAX_LAYERS = 63


cdef void _gemm_nn_ptr(double *A, double *B, double *C, int m, int k, int n,
                       double beta) noexcept nogil:
    cdef char cn = b'N'
    cdef double one = 1.0
    if m == 0 or n == 0:
        return
    dgemm(&cn, &cn, &n, &m, &k, &one, B, &n, A, &k, &beta, C, &n)


cdef void _gemm_nt_ptr(double *A, double *B, double *C, int m, int n, int p,
                       double beta) noexcept nogil:
    # C(m,p) = A(m,n) @ B(p,n)^T + beta * C, all row-major
    cdef char cn = b'N'
    cdef char ct = b'T'
    cdef double one = 1.0
    if m == 0 or p == 0:
        return
    dgemm(&ct, &cn, &p, &m, &n, &one, B, &n, A, &n, &beta, C, &p)


cdef void _mask_ptr(double *T, double *act, Py_ssize_t size) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(size):
        T[i] *= act[i] > 0.0


cdef void _metric_matvec(double *P, double **Wp, int *wi, int *wo,
                         int *relu, double **tapep, double **tbp,
                         double *G, double *AP, int n, int nl, int L,
                         double inv_sigma2) noexcept nogil:
    """AP = J^T (inv_sigma2 * J P) + P using preallocated layer buffers."""
    cdef int l
    cdef Py_ssize_t i
    cdef double *src = P
    for l in range(nl):
        _gemm_nn_ptr(src, Wp[l], tbp[l], n, wi[l], wo[l], 0.0)
        if relu[l]:
            _mask_ptr(tbp[l], tapep[l], <Py_ssize_t> n * wo[l])
        src = tbp[l]
    for i in range(<Py_ssize_t> n * wo[nl - 1]):
        tbp[nl - 1][i] *= inv_sigma2
    for l in range(nl - 1, -1, -1):
        if relu[l]:
            _mask_ptr(tbp[l], tapep[l], <Py_ssize_t> n * wo[l])
        _gemm_nt_ptr(tbp[l], Wp[l], G if l == 0 else tbp[l - 1],
                     n, wo[l], wi[l], 0.0)
    for i in range(<Py_ssize_t> n * L):
        AP[i] = G[i] + P[i]


def cg_metric_solve_batch(Ws, acts, tape, B, double inv_sigma2, double tol,
                          int max_iter):
    """Row-wise CG on the metric operator, fully fused: the per-iteration
    vector algebra and the matvec's layer sweeps all run in C with buffers
    allocated once per call.  Mirrors the generic batched CG exactly:
    zero initial guess, rows freeze when ||r|| <= tol * ||b||, and
    p^T A p <= 0 reports a breakdown (returned as the offending row index,
    -1 when none).

    Returns (X, iterations, residuals, converged, breakdown_row).
    """
    cdef int nl = len(Ws)
    if nl > MAX_LAYERS:
        raise ValueError("too many layers for the fused kernel")
    cdef Py_ssize_t n = B.shape[0]
    cdef int L = <int> B.shape[1]
    cdef int ni = <int> n
    if n == 0:
        return (np.zeros((0, L)), np.zeros(0, dtype=np.int64), np.zeros(0),
                np.zeros(0, dtype=bool), -1)

    # pin the per-layer arrays and collect raw pointers
    cdef double *Wp[MAX_LAYERS]
    cdef double *tapep[MAX_LAYERS]
    cdef double *tbp[MAX_LAYERS]
    cdef int wi[MAX_LAYERS]
    cdef int wo[MAX_LAYERS]
    cdef int relu[MAX_LAYERS]
    cdef double[:, ::1] mv
    buffers = []
    cdef int l
    for l in range(nl):
        mv = Ws[l]
        Wp[l] = &mv[0, 0]
        wi[l] = <int> mv.shape[0]
        wo[l] = <int> mv.shape[1]
        relu[l] = 1 if acts[l] == 1 else 0
        mv = tape[l + 1]
        tapep[l] = &mv[0, 0]
        buf = np.empty((n, wo[l]))
        buffers.append(buf)
        mv = buf
        tbp[l] = &mv[0, 0]

    X_arr = np.zeros((n, L))
    R_arr = np.array(B, dtype=np.float64, copy=True)
    P_arr = np.array(B, dtype=np.float64, copy=True)
    G_arr = np.empty((n, L))
    AP_arr = np.empty((n, L))
    iters_arr = np.zeros(n, dtype=np.int64)
    resid_arr = np.zeros(n)
    rs_arr = np.empty(n)
    bnorm_arr = np.empty(n)
    active_arr = np.empty(n, dtype=np.uint8)

    cdef double[:, ::1] Xv = X_arr
    cdef double[:, ::1] Rv = R_arr
    cdef double[:, ::1] Pv = P_arr
    cdef double[:, ::1] Gv = G_arr
    cdef double[:, ::1] APv = AP_arr
    cdef long long[::1] itv = iters_arr
    cdef double[::1] residv = resid_arr
    cdef double[::1] rsv = rs_arr
    cdef double[::1] bnv = bnorm_arr
    cdef unsigned char[::1] av = active_arr

    cdef Py_ssize_t i, j
    cdef int it, n_active
    cdef double s, pap, alpha, beta, rs_new
    cdef Py_ssize_t breakdown = -1

    with nogil:
        n_active = 0
        for i in range(n):
            s = 0.0
            for j in range(L):
                s += Rv[i, j] * Rv[i, j]
            rsv[i] = s
            bnv[i] = sqrt(s)
            if bnv[i] > 0.0:
                av[i] = 1
                n_active += 1
            else:
                av[i] = 0
                for j in range(L):
                    Pv[i, j] = 0.0

        for it in range(max_iter):
            if n_active == 0 or breakdown >= 0:
                break
            _metric_matvec(&Pv[0, 0], Wp, wi, wo, relu, tapep, tbp,
                           &Gv[0, 0], &APv[0, 0], ni, nl, L, inv_sigma2)
            for i in range(n):
                if not av[i]:
                    continue
                pap = 0.0
                for j in range(L):
                    pap += Pv[i, j] * APv[i, j]
                if pap <= 0.0:
                    breakdown = i
                    break
                alpha = rsv[i] / pap
                rs_new = 0.0
                for j in range(L):
                    Xv[i, j] += alpha * Pv[i, j]
                    Rv[i, j] -= alpha * APv[i, j]
                    rs_new += Rv[i, j] * Rv[i, j]
                itv[i] += 1
                if sqrt(rs_new) <= tol * bnv[i]:
                    av[i] = 0
                    n_active -= 1
                    for j in range(L):
                        Pv[i, j] = 0.0
                else:
                    beta = rs_new / rsv[i]
                    for j in range(L):
                        Pv[i, j] = Rv[i, j] + beta * Pv[i, j]
                rsv[i] = rs_new

        for i in range(n):
            if bnv[i] > 0.0:
                residv[i] = sqrt(rsv[i]) / bnv[i]

    converged = resid_arr <= tol
    return X_arr, iters_arr, resid_arr, converged, int(breakdown)
