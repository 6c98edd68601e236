# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot-loop kernels; semantics mirror ``_npk`` (see its docstring).

Integer outputs are bit-identical to the fallback given identical inputs;
floating-point reductions may differ from NumPy's pairwise summation at the
last few ulps.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt

cnp.import_array()


def softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1]
    out_arr = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            out[i, j] = exp(x[i, j] - m)
            s += out[i, j]
        for j in range(c):
            out[i, j] /= s
    return out_arr


def log_softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], c = x.shape[1]
    out_arr = np.empty((r, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(r):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            s += exp(x[i, j] - m)
        s = log(s)
        for j in range(c):
            out[i, j] = x[i, j] - m - s
    return out_arr


def forward_mask_tokens(tokens, double keep_prob, long long mask_id, u):
    cdef cnp.int64_t[::1] tok = np.ascontiguousarray(tokens, dtype=np.int64)
    cdef double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t k = tok.shape[0]
    out_arr = np.empty(k, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(k):
        out[i] = tok[i] if uu[i] < keep_prob else mask_id
    return out_arr


def unmask_step(
    tokens,
    double[:, ::1] sample_probs,
    double[:, ::1] logp_probs,
    double unmask_prob,
    long long mask_id,
    double[::1] u_gate,
    double[::1] u_tok,
):
    cdef cnp.int64_t[::1] tok = np.ascontiguousarray(tokens, dtype=np.int64)
    cdef Py_ssize_t k = tok.shape[0], n_act = sample_probs.shape[1]
    out_arr = np.empty(k, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef Py_ssize_t i, j, v
    cdef double cs, logp = 0.0
    cdef int n_stay = 0
    for i in range(k):
        if tok[i] != mask_id:
            out[i] = tok[i]
            continue
        if u_gate[i] < unmask_prob:
            cs = 0.0
            v = n_act - 1
            for j in range(n_act):
                cs += sample_probs[i, j]
                if u_tok[i] < cs:
                    v = j
                    break
            while v > 0 and sample_probs[i, v] <= 0.0:
                v -= 1
            out[i] = v
            logp += log(unmask_prob * logp_probs[i, v])
        else:
            out[i] = mask_id
            n_stay += 1
    if n_stay:
        logp += n_stay * log1p(-unmask_prob)
    return out_arr, logp


def adam_update(
    double[::1] p,
    double[::1] g,
    double[::1] m,
    double[::1] v,
    double lr,
    double beta1,
    double beta2,
    double eps,
    long long t,
):
    cdef Py_ssize_t n = p.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef Py_ssize_t i
    for i in range(n):
        m[i] = m[i] * beta1 + (1.0 - beta1) * g[i]
        v[i] = v[i] * beta2 + (1.0 - beta2) * (g[i] * g[i])
        p[i] -= (lr * (m[i] / bc1)) / (sqrt(v[i] / bc2) + eps)
    return None
