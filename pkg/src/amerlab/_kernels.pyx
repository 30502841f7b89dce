# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: batched Hungarian assignment, exact top-k scan, GeLU."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.stdlib cimport malloc, free
from libc.math cimport INFINITY, erf, erff, exp, expf

cnp.import_array()

BACKEND = "cython"


cdef void _hungarian_one(const double[:, ::1] c, Py_ssize_t n, long long[::1] out,
                         double* u, double* v, Py_ssize_t* p, Py_ssize_t* way,
                         double* minv, char* used) noexcept nogil:
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    for j in range(n + 1):
        u[j] = 0.0
        v[j] = 0.0
        p[j] = 0
        way[j] = 0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    for j in range(1, n + 1):
        out[p[j] - 1] = j - 1


def hungarian_batch(cost):
    """Solve a stack of square assignment problems, shape (B, m, m) -> (B, m)."""
    cdef const double[:, :, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t nb = c.shape[0], m = c.shape[1], b
    if c.shape[2] != m:
        raise ValueError("cost matrices must be square")
    result = np.empty((nb, m), dtype=np.int64)
    cdef long long[:, ::1] out = result
    cdef double* u = <double*> malloc((m + 1) * sizeof(double))
    cdef double* v = <double*> malloc((m + 1) * sizeof(double))
    cdef double* minv = <double*> malloc((m + 1) * sizeof(double))
    cdef Py_ssize_t* p = <Py_ssize_t*> malloc((m + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* way = <Py_ssize_t*> malloc((m + 1) * sizeof(Py_ssize_t))
    cdef char* used = <char*> malloc((m + 1) * sizeof(char))
    try:
        with nogil:
            for b in range(nb):
                _hungarian_one(c[b], m, out[b], u, v, p, way, minv, used)
    finally:
        free(u); free(v); free(minv); free(p); free(way); free(used)
    return result


cdef inline bint _worse(double sa, long long ia, double sb, long long ib) noexcept nogil:
    # ordering is (score desc, id asc); "worse" sits at the heap root
    return sa < sb or (sa == sb and ia > ib)


cdef void _sift_down(double* hs, long long* hi, Py_ssize_t size, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t child
    cdef double ts
    cdef long long ti
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and _worse(hs[child + 1], hi[child + 1], hs[child], hi[child]):
            child += 1
        if _worse(hs[child], hi[child], hs[pos], hi[pos]):
            ts = hs[pos]; hs[pos] = hs[child]; hs[child] = ts
            ti = hi[pos]; hi[pos] = hi[child]; hi[child] = ti
            pos = child
        else:
            break


cdef void _sift_up(double* hs, long long* hi, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t parent
    cdef double ts
    cdef long long ti
    while pos > 0:
        parent = (pos - 1) // 2
        if _worse(hs[pos], hi[pos], hs[parent], hi[parent]):
            ts = hs[pos]; hs[pos] = hs[parent]; hs[parent] = ts
            ti = hi[pos]; hi[pos] = hi[parent]; hi[parent] = ti
            pos = parent
        else:
            break


cdef void _scan_one(const float[:, ::1] e, const double[::1] q, Py_ssize_t k,
                    long long[::1] out_ids, double[::1] out_scores) noexcept nogil:
    cdef Py_ssize_t n = e.shape[0], d = e.shape[1], j, a, size = 0, last
    cdef double s, ts
    cdef long long ti
    cdef double* hs = <double*> malloc(k * sizeof(double))
    cdef long long* hi = <long long*> malloc(k * sizeof(long long))
    cdef Py_ssize_t d4 = d - d % 4
    cdef double s0, s1, s2, s3
    cdef const float* row
    for j in range(n):
        row = &e[j, 0]
        s0 = 0.0; s1 = 0.0; s2 = 0.0; s3 = 0.0
        for a in range(0, d4, 4):
            s0 = s0 + <double> row[a] * q[a]
            s1 = s1 + <double> row[a + 1] * q[a + 1]
            s2 = s2 + <double> row[a + 2] * q[a + 2]
            s3 = s3 + <double> row[a + 3] * q[a + 3]
        s = (s0 + s1) + (s2 + s3)
        for a in range(d4, d):
            s = s + <double> row[a] * q[a]
        if size < k:
            hs[size] = s
            hi[size] = j
            size += 1
            _sift_up(hs, hi, size - 1)
        elif _worse(hs[0], hi[0], s, j):
            hs[0] = s
            hi[0] = j
            _sift_down(hs, hi, size, 0)
    # heap-sort: pop the worst element to the back until sorted best-first
    last = size - 1
    while last > 0:
        ts = hs[0]; hs[0] = hs[last]; hs[last] = ts
        ti = hi[0]; hi[0] = hi[last]; hi[last] = ti
        _sift_down(hs, hi, last, 0)
        last -= 1
    for j in range(size):
        out_ids[j] = hi[j]
        out_scores[j] = hs[j]
    free(hs)
    free(hi)


def topk_search(entries, queries, Py_ssize_t k, int n_threads=1):
    """Exact top-k inner-product scan; float32 entries, float64 accumulation."""
    cdef const float[:, ::1] e = np.ascontiguousarray(entries, dtype=np.float32)
    cdef const double[:, ::1] q = np.ascontiguousarray(queries, dtype=np.float64)
    cdef Py_ssize_t n = e.shape[0], nq = q.shape[0], qi
    cdef Py_ssize_t kk = min(k, n)
    if q.shape[1] != e.shape[1]:
        raise ValueError("dimension mismatch")
    ids = np.empty((nq, kk), dtype=np.int64)
    scores = np.empty((nq, kk), dtype=np.float64)
    cdef long long[:, ::1] ids_v = ids
    cdef double[:, ::1] sc_v = scores
    if nq == 0 or kk == 0:
        return ids, scores
    if n_threads < 1:
        n_threads = 1
    for qi in prange(nq, nogil=True, num_threads=n_threads, schedule="static"):
        _scan_one(e, q[qi], kk, ids_v[qi], sc_v[qi])
    return ids, scores


def gelu_pair(x):
    """Exact GeLU and its derivative, elementwise; float32 or float64."""
    arr = np.ascontiguousarray(x)
    if arr.dtype == np.float32:
        return _gelu_pair_f(arr)
    return _gelu_pair_d(np.ascontiguousarray(arr, dtype=np.float64))


cdef double _RS2 = 0.7071067811865476
cdef double _RS2PI = 0.3989422804014327


def _gelu_pair_d(cnp.ndarray arr):
    y = np.empty_like(arr)
    dy = np.empty_like(arr)
    cdef const double[::1] xv = arr.reshape(-1)
    cdef double[::1] yv = y.reshape(-1), dv = dy.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double v, phi
    with nogil:
        for i in range(n):
            v = xv[i]
            phi = 0.5 * (1.0 + erf(v * _RS2))
            yv[i] = v * phi
            dv[i] = phi + v * _RS2PI * exp(-0.5 * v * v)
    return y, dy


def _gelu_pair_f(cnp.ndarray arr):
    y = np.empty_like(arr)
    dy = np.empty_like(arr)
    cdef const float[::1] xv = arr.reshape(-1)
    cdef float[::1] yv = y.reshape(-1), dv = dy.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef float v, phi
    with nogil:
        for i in range(n):
            v = xv[i]
            phi = 0.5 * (1.0 + erff(v * <float> _RS2))
            yv[i] = v * phi
            dv[i] = phi + v * <float> _RS2PI * expf(<float> -0.5 * v * v)
    return y, dy
