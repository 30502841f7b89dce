"""Pure-Python/numpy implementations of the hot kernels.

These mirror ``amerlab._kernels`` (Cython) call for call and are selected
automatically when the extension is not built, or when ``AMERLAB_PURE_PYTHON``
is set in the environment.
"""

import numpy as np
from scipy.special import erf

BACKEND = "python"

_RS2 = 0.7071067811865476
_RS2PI = 0.3989422804014327

_SHARD = 65536


def hungarian_batch(cost):
    """Solve a stack of square assignment problems.

    Parameters
    ----------
    cost : float64 array, shape (B, m, m)

    Returns
    -------
    int64 array, shape (B, m); row i of problem b is assigned column out[b, i].
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    nb, m, m2 = cost.shape
    if m != m2:
        raise ValueError("cost matrices must be square")
    out = np.empty((nb, m), dtype=np.int64)
    for b in range(nb):
        out[b] = _hungarian_one(cost[b].tolist(), m)
    return out


def _hungarian_one(c, n):
    # shortest augmenting path with row/column potentials, 1-indexed
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = c[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
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
    assign = [0] * n
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign


def _topk_scores(scores, offset, k):
    n = scores.shape[0]
    if k >= n:
        pos = np.lexsort((np.arange(n), -scores))
    else:
        part = np.argpartition(-scores, k - 1)[:k]
        thr = scores[part].min()
        cand = np.flatnonzero(scores >= thr)
        pos = cand[np.lexsort((cand, -scores[cand]))][:k]
    return pos + offset, scores[pos]


def topk_search(entries, queries, k, n_threads=1):
    """Exact top-k inner-product search with (score desc, id asc) ordering.

    ``entries`` is float32 (n, d); ``queries`` float64 (nq, d). Scores are
    accumulated in float64. Returns ``(ids int64 (nq, k'), scores float64
    (nq, k'))`` with ``k' = min(k, n)``. ``n_threads`` is accepted for parity
    with the compiled kernel and ignored.
    """
    entries = np.ascontiguousarray(entries, dtype=np.float32)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    n = entries.shape[0]
    nq = queries.shape[0]
    kk = min(k, n)
    ids = np.empty((nq, kk), dtype=np.int64)
    scores = np.empty((nq, kk), dtype=np.float64)
    if nq == 0:
        return ids, scores
    shard_ids = [[] for _ in range(nq)]
    shard_scores = [[] for _ in range(nq)]
    for start in range(0, n, _SHARD):
        chunk = entries[start:start + _SHARD].astype(np.float64)
        for qi in range(nq):
            s = chunk @ queries[qi]
            i, sc = _topk_scores(s, start, kk)
            shard_ids[qi].append(i)
            shard_scores[qi].append(sc)
    for qi in range(nq):
        i = np.concatenate(shard_ids[qi])
        sc = np.concatenate(shard_scores[qi])
        order = np.lexsort((i, -sc))[:kk]
        ids[qi] = i[order]
        scores[qi] = sc[order]
    return ids, scores


def gelu_pair(x):
    """Exact GeLU and its derivative, elementwise; float32 or float64."""
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    t = x.dtype.type
    phi = t(0.5) * (t(1.0) + erf(x * t(_RS2)))
    return x * phi, phi + x * t(_RS2PI) * np.exp(t(-0.5) * x * x)
