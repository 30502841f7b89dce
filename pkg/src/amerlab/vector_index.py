"""Exact top-k inner-product search over a flat float32 matrix of unit vectors."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from amerlab import kernels
from amerlab.errors import DimMismatch, EmptyCorpus, FormatError, NonUnitEntry
from amerlab.fileio import atomic_open

UNIT_TOL = 1e-6


def default_threads() -> int:
    return os.cpu_count() or 1


@dataclass
class RankedList:
    """Corpus ids with scores, best first; ``query`` tags the originating query."""

    ids: np.ndarray
    scores: np.ndarray
    query: int | str | None = None

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        return (isinstance(other, RankedList) and self.query == other.query
                and np.array_equal(self.ids, other.ids) and np.array_equal(self.scores, other.scores))


class FlatIndex:
    """Immutable exact index. Position order is corpus order."""

    def __init__(self, entries, ids=None):
        entries = np.ascontiguousarray(entries, dtype=np.float32)
        if entries.ndim != 2 or entries.shape[0] == 0:
            raise EmptyCorpus("index needs at least one entry")
        norms = np.linalg.norm(entries.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
        if bad.size:
            raise NonUnitEntry(f"entry {int(bad[0])} has norm {norms[bad[0]]:.6g}")
        self.entries = entries
        self.entries.setflags(write=False)
        self.ids = np.arange(len(entries), dtype=np.int64) if ids is None else np.asarray(ids, np.int64)
        if self.ids.shape != (len(entries),):
            raise DimMismatch("id map length differs from entry count")

    @property
    def d(self) -> int:
        return self.entries.shape[1]

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def __len__(self):
        return self.n

    def search(self, q, k: int, query=None) -> RankedList:
        return self.batch_search(np.asarray(q)[None], k, queries_tags=[query])[0]

    def batch_search(self, queries, k: int, n_threads: int | None = None, queries_tags=None):
        """Search every row of ``queries``; result order follows input order."""
        ids, scores = self.search_arrays(queries, k, n_threads)
        tags = queries_tags if queries_tags is not None else range(len(ids))
        return [RankedList(i, s, t) for i, s, t in zip(ids, scores, tags)]

    def search_arrays(self, queries, k: int, n_threads: int | None = None):
        """Array form of :meth:`batch_search`: ``(ids, scores)`` of shape (nq, min(k, n))."""
        if k < 1:
            raise ValueError("k must be >= 1")
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim != 2:
            queries = queries.reshape(-1, self.d) if queries.size == 0 else np.atleast_2d(queries)
        if queries.shape[1] != self.d:
            raise DimMismatch(f"query dim {queries.shape[1]} vs index dim {self.d}")
        pos, scores = kernels.topk_search(self.entries, queries, int(k),
                                          n_threads or default_threads())
        return self.ids[pos], scores


def build(corpus) -> FlatIndex:
    """Index a :class:`~amerlab.synthgen.Corpus` or an (n, d) array."""
    vectors = getattr(corpus, "vectors", corpus)
    return FlatIndex(vectors)


def naive_search(entries, q, k):
    """Full-sort oracle with the same ordering rule (score desc, id asc)."""
    e = np.asarray(entries, dtype=np.float32).astype(np.float64)
    s = e @ np.asarray(q, dtype=np.float64)
    order = np.lexsort((np.arange(len(s)), -s))[:k]
    return order, s[order]


# ------------------------------------------------------------------ run files


def write_run(path, lists):
    """Lines of ``query_id corpus_id rank score``; ranks start at 1."""
    with atomic_open(path, "w") as fh:
        for rl in lists:
            for r, (cid, sc) in enumerate(zip(rl.ids, rl.scores), start=1):
                fh.write(f"{rl.query} {int(cid)} {r} {float(np.float32(sc))!r}\n")


def read_run(path) -> dict:
    """Parse a run file into ``{query_id: RankedList}`` sorted by rank."""
    rows: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                qid, cid, rank, score = parts[0], int(parts[1]), int(parts[2]), float(parts[3])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(qid, []).append((rank, cid, score))
    out = {}
    for qid, items in rows.items():
        items.sort()
        out[qid] = RankedList(np.array([c for _, c, _ in items], dtype=np.int64),
                              np.array([s for _, _, s in items], dtype=np.float64), qid)
    return out


def search(index: FlatIndex, q, k: int, query=None) -> RankedList:
    return index.search(q, k, query)


def batch_search(index: FlatIndex, queries, k: int, n_threads: int | None = None):
    return index.batch_search(queries, k, n_threads)
