# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: categorical row sampling, factored Bellman backups,
and the fused variance-reduced inner step.

Bit-compatibility contract with _pure.py: identical floating-point operation
order (the extension is built with -ffp-contract=off so no FMA contraction
reorders the arithmetic).
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64


cdef inline Py_ssize_t _upper_bound(const double[:] cdf, double u) nogil:
    cdef Py_ssize_t lo = 0
    cdef Py_ssize_t hi = cdf.shape[0]
    cdef Py_ssize_t mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if cdf[mid] <= u:
            lo = mid + 1
        else:
            hi = mid
    return lo


def sample_rows(const double[:, ::1] cdfs, const double[:] u):
    cdef Py_ssize_t n_rows = cdfs.shape[0]
    cdef Py_ssize_t last = cdfs.shape[1] - 1
    out = np.empty(n_rows, dtype=np.int64)
    cdef i64[:] out_v = out
    cdef Py_ssize_t e, idx
    with nogil:
        for e in range(n_rows):
            idx = _upper_bound(cdfs[e], u[e])
            if idx > last:
                idx = last
            out_v[e] = idx
    return out


cdef void _vmax(const double[:] q, Py_ssize_t n_states, double[:] out) nogil:
    cdef Py_ssize_t n_actions = q.shape[0] // n_states
    cdef Py_ssize_t s, a
    cdef double best, v
    for s in range(n_states):
        best = q[s]
        for a in range(1, n_actions):
            v = q[a * n_states + s]
            if v > best:
                best = v
        out[s] = best


def max_over_actions(const double[:] q, Py_ssize_t n_states):
    out = np.empty(n_states, dtype=np.float64)
    cdef double[:] out_v = out
    with nogil:
        _vmax(q, n_states, out_v)
    return out


def assemble_next(const i64[:] samples, const i64[:, ::1] src,
                  const i64[:, ::1] contrib):
    cdef Py_ssize_t n_comp = src.shape[0]
    cdef Py_ssize_t n_pairs = src.shape[1]
    out = np.empty(n_pairs, dtype=np.int64)
    cdef i64[:] out_v = out
    cdef Py_ssize_t x, j
    cdef i64 acc
    with nogil:
        for x in range(n_pairs):
            acc = 0
            for j in range(n_comp):
                acc += contrib[j, samples[src[j, x]]]
            out_v[x] = acc
    return out


def table_backup(const i64[:] samples, const i64[:, ::1] src,
                 const i64[:, ::1] contrib, const double[:] vmax,
                 const double[:] rhat, double gamma):
    cdef Py_ssize_t n_comp = src.shape[0]
    cdef Py_ssize_t n_pairs = src.shape[1]
    out = np.empty(n_pairs, dtype=np.float64)
    cdef double[:] out_v = out
    cdef Py_ssize_t x, j
    cdef i64 acc
    cdef double t
    with nogil:
        for x in range(n_pairs):
            acc = 0
            for j in range(n_comp):
                acc += contrib[j, samples[src[j, x]]]
            t = gamma * vmax[acc]
            out_v[x] = rhat[x] + t
    return out


def vrql_step(double[:] q, const i64[:] samples, const i64[:, ::1] src,
              const i64[:, ::1] contrib, const double[:] vmax_ref,
              const double[:] href, const double[:] rhat, double gamma,
              double eta, Py_ssize_t n_states):
    cdef Py_ssize_t n_comp = src.shape[0]
    cdef Py_ssize_t n_pairs = src.shape[1]
    vm_arr = np.empty(n_states, dtype=np.float64)
    cdef double[:] vm = vm_arr
    cdef Py_ssize_t x, j
    cdef i64 acc
    cdef double t1, t2, h1, h2, d
    with nogil:
        _vmax(q, n_states, vm)
        for x in range(n_pairs):
            acc = 0
            for j in range(n_comp):
                acc += contrib[j, samples[src[j, x]]]
            t1 = gamma * vm[acc]
            h1 = rhat[x] + t1
            t2 = gamma * vmax_ref[acc]
            h2 = rhat[x] + t2
            d = (h1 - q[x]) + (href[x] - h2)
            q[x] = q[x] + eta * d
    return None
