"""Retrieval evaluation: MRecall@k, round-robin fusion, MMR re-ranking,
diversity-binned analysis and output-diversity statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from amerlab import seqmodel
from amerlab.errors import (ConfigError, DimMismatch, EmptyTargets, FormatError,
                            MissingCorpusIds, SinglePrediction, SingleTarget)
from amerlab.fileio import atomic_open, write_text
from amerlab.tensor_core import normalize
from amerlab.vector_index import FlatIndex, RankedList

AMER = "Amer"
SINGLE_QUERY = "SingleQuery"
SINGLE_QUERY_MMR = "SingleQuery+MMR"
MODES = (AMER, SINGLE_QUERY, SINGLE_QUERY_MMR)
METRICS = ("euclidean", "cosine")


@dataclass
class EvalConfig:
    ks: tuple = (10, 100)
    m_pred: int | None = None  # defaults to the dataset's m
    metric: str = "euclidean"
    bins: int = 4
    lambdas: tuple = (0.5, 0.75, 0.9)
    mmr_depth: int = 500

    def validate(self):
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("eval.ks must be non-empty and >= 1")
        if self.bins < 2:
            raise ConfigError("eval.bins must be >= 2")
        if self.metric not in METRICS:
            raise ConfigError(f"eval.metric must be one of {METRICS}")
        if any(not 0.0 <= lam <= 1.0 for lam in self.lambdas) or not self.lambdas:
            raise ConfigError("eval.lambdas must lie in [0, 1]")
        if self.mmr_depth < 1 or (self.m_pred is not None and self.m_pred < 1):
            raise ConfigError("eval.mmr_depth and eval.m_pred must be >= 1")
        self.ks = tuple(sorted(set(int(k) for k in self.ks)))
        return self


# ------------------------------------------------------------------ metrics


def mrecall(retrieved, targets, k: int) -> int:
    """1 if the top-k holds all targets (k >= m) or k of them (k < m), else 0."""
    targets = list(targets)
    if not targets:
        raise EmptyTargets("no target ids")
    if len(set(targets)) != len(targets):
        raise ValueError("target ids must be distinct")
    top = set(np.asarray(retrieved)[:k].tolist())
    hits = sum(1 for t in targets if t in top)
    return int(hits >= min(k, len(targets)))


def _ids(lst):
    return np.asarray(lst.ids if isinstance(lst, RankedList) else lst)


def round_robin_merge(lists, k: int, query=None) -> RankedList:
    """Interleave ranked lists position by position, skipping ids already taken."""
    if k < 1:
        raise ValueError("k must be >= 1")
    arrays = [_ids(lst).tolist() for lst in lists]
    taken, out = set(), []
    depth = max((len(a) for a in arrays), default=0)
    for pos in range(depth):
        for a in arrays:
            if pos < len(a) and a[pos] not in taken:
                taken.add(a[pos])
                out.append(a[pos])
                if len(out) == k:
                    break
        if len(out) == k:
            break
    ids = np.array(out) if out else np.empty(0, dtype=np.int64)
    return RankedList(ids, 1.0 / (1.0 + np.arange(len(ids))), query)


def mmr_order(sim_q, sim_docs, lam: float, k: int) -> np.ndarray:
    """Greedy MMR selection over candidates in their original rank order.

    ``sim_q`` (n,) holds query similarities and ``sim_docs`` (n, n) pairwise
    candidate similarities. Returns selected candidate positions; ties go to
    the better original rank.
    """
    sim_q = np.asarray(sim_q, dtype=np.float64)
    sim_docs = np.asarray(sim_docs, dtype=np.float64)
    n = len(sim_q)
    k = min(k, n)
    if lam == 1.0:
        return np.arange(k)
    penalty = np.full(n, -np.inf)
    chosen = np.zeros(n, dtype=bool)
    out = np.empty(k, dtype=np.int64)
    for step in range(k):
        score = lam * sim_q - (1.0 - lam) * (penalty if step else 0.0)
        score = np.where(chosen, -np.inf, score)
        j = int(np.argmax(score))
        out[step] = j
        chosen[j] = True
        penalty = np.maximum(penalty, sim_docs[j])
    return out


def mmr_rerank(q, candidates: RankedList, vectors, lam: float, k: int) -> RankedList:
    """Re-rank ``candidates`` (with their unit ``vectors``) by maximal marginal relevance."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    v = np.asarray(vectors, dtype=np.float64)
    sim_q = v @ np.asarray(q, dtype=np.float64)
    order = mmr_order(sim_q, v @ v.T, lam, k)
    return RankedList(candidates.ids[order], sim_q[order], candidates.query)


def _pairwise_mean(vecs, fn):
    n, m, _ = vecs.shape
    iu, ju = np.triu_indices(m, 1)
    return fn(vecs[:, iu], vecs[:, ju]).mean(axis=1)


def pairwise_statistic(vectors, metric: str) -> np.ndarray:
    """Per-query mean pairwise distance over all target pairs, (n, m, d) -> (n,)."""
    v = normalize(np.asarray(vectors, dtype=np.float64))
    if v.shape[1] < 2:
        raise SingleTarget("need at least two targets per query")
    if metric == "euclidean":
        return _pairwise_mean(v, lambda a, b: np.linalg.norm(a - b, axis=-1))
    if metric == "cosine":
        return _pairwise_mean(v, lambda a, b: 1.0 - np.sum(a * b, axis=-1))
    raise ConfigError(f"unknown diversity metric {metric!r}")


def diversity_bins(vectors, metric: str = "euclidean", bins: int = 4):
    """Equal-count quantile bins of queries by target diversity.

    Returns ``(statistic, bin)``; bin 0 holds the least diverse queries and
    earlier bins absorb the remainder.
    """
    if bins < 2:
        raise ConfigError("bins must be >= 2")
    stat = pairwise_statistic(vectors, metric)
    n = len(stat)
    order = np.argsort(stat, kind="stable")
    sizes = np.full(bins, n // bins)
    sizes[: n % bins] += 1
    labels = np.repeat(np.arange(bins), sizes)
    out = np.empty(n, dtype=np.int64)
    out[order] = labels
    return stat, out


def mean_pairwise_similarity(vectors) -> float:
    v = normalize(np.asarray(vectors, dtype=np.float64))
    if v.ndim != 3 or v.shape[1] < 2:
        raise SinglePrediction("need at least two embeddings per query")
    return float(_pairwise_mean(v, lambda a, b: np.sum(a * b, axis=-1)).mean())


def output_diversity(preds) -> float:
    """Mean over queries of the mean pairwise cosine similarity of predictions."""
    return mean_pairwise_similarity(preds)


# ------------------------------------------------------------------ reports


@dataclass
class EvalReport:
    mode: str
    config: dict
    n_queries: int
    overall: dict          # k -> MRecall
    per_bin: dict          # k -> [MRecall per bin]
    bin_sizes: list
    queries: list          # per-query records
    output_diversity: float | None = None
    target_diversity: float | None = None
    mmr_lambda: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["overall"] = {str(k): v for k, v in self.overall.items()}
        d["per_bin"] = {str(k): v for k, v in self.per_bin.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        d["overall"] = {int(k): v for k, v in d["overall"].items()}
        d["per_bin"] = {int(k): v for k, v in d["per_bin"].items()}
        return cls(**d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "bin", "metric", "n_queries", "mrecall"])
        metric = self.config.get("metric", "")
        for k in sorted(self.overall):
            w.writerow([k, "all", metric, self.n_queries, f"{self.overall[k]:.6f}"])
            for b, (size, mr) in enumerate(zip(self.bin_sizes, self.per_bin[k]), start=1):
                w.writerow([k, b, metric, size, f"{mr:.6f}"])
        return buf.getvalue()

    def save(self, json_path, csv_path=None):
        write_text(json_path, self.to_json())
        if csv_path is not None:
            write_text(csv_path, self.to_csv())


def score_lists(merged: dict, target_ids, stat, bins, cfg: EvalConfig, mode: str,
                query_ids=None, **extra) -> EvalReport:
    """Build a report from per-k retrieved id lists.

    ``merged[k]`` is a sequence (one per query) of retrieved ids.
    """
    n = len(target_ids)
    qids = list(range(n)) if query_ids is None else [q if isinstance(q, str) else int(q)
                                                      for q in query_ids]
    hits = {k: np.array([mrecall(merged[k][i], target_ids[i], k) for i in range(n)]) for k in cfg.ks}
    sizes = np.bincount(bins, minlength=cfg.bins)
    overall = {k: float(h.mean()) if n else float("nan") for k, h in hits.items()}
    per_bin = {k: [float(h[bins == b].mean()) if sizes[b] else float("nan") for b in range(cfg.bins)]
               for k, h in hits.items()}
    records = [
        {"query_id": qids[i], "statistic": float(stat[i]), "bin": int(bins[i]) + 1,
         "hits": {str(k): int(hits[k][i]) for k in cfg.ks}}
        for i in range(n)
    ]
    return EvalReport(mode=mode, config=asdict(cfg), n_queries=n, overall=overall,
                      per_bin=per_bin, bin_sizes=[int(s) for s in sizes], queries=records, **extra)


def _check_ids(index: FlatIndex, target_ids):
    t = np.asarray(target_ids)
    if t.size and (t.min() < 0 or t.max() >= index.n):
        raise MissingCorpusIds("target ids fall outside the corpus")


def _amer_lists(index, preds, ks, n_threads):
    n, m_pred, d = preds.shape
    depth = max(ks)
    ids, _ = index.search_arrays(preds.reshape(n * m_pred, d), depth, n_threads)
    ids = ids.reshape(n, m_pred, -1)
    return {k: [round_robin_merge(ids[i], k).ids for i in range(n)] for k in ks}


def _mmr_lists(index, q, lam, depth, k_max, n_threads):
    cand, _ = index.search_arrays(q, depth, n_threads)
    out = []
    for i in range(len(q)):
        v = index.entries[cand[i]].astype(np.float64)
        order = mmr_order(v @ q[i], v @ v.T, lam, k_max)
        out.append(cand[i][order])
    return out


def _tune_lambda(params, mcfg, val, index, cfg, n_threads):
    q = seqmodel.decode(params, mcfg, val.inputs, 1)[:, 0]
    best = None
    for lam in cfg.lambdas:
        lists = _mmr_lists(index, q, lam, cfg.mmr_depth, max(cfg.ks), n_threads)
        score = np.mean([mrecall(lists[i], val.target_ids[i], k)
                         for k in cfg.ks for i in range(len(q))])
        if best is None or score > best[1]:
            best = (lam, score)
    return best[0]


def evaluate_model(params, mcfg, dataset, index: FlatIndex, cfg: EvalConfig, mode: str = AMER,
                   val_dataset=None, n_threads=None, return_lists=False):
    """Decode queries for ``dataset`` and score retrieval against ``index``.

    With ``return_lists`` also returns the final ranked id lists (depth
    max(ks)) as ``RankedList`` objects tagged by query id.
    """
    cfg.validate()
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if dataset.d != index.d or mcfg.d != index.d:
        raise DimMismatch(f"dataset/model/index dims {dataset.d}/{mcfg.d}/{index.d}")
    _check_ids(index, dataset.target_ids)
    stat, bins = diversity_bins(dataset.targets, cfg.metric, cfg.bins)
    extra = {"target_diversity": mean_pairwise_similarity(dataset.targets)}
    if mode == AMER:
        m_pred = cfg.m_pred or dataset.m
        preds = seqmodel.decode(params, mcfg, dataset.inputs, m_pred)
        merged = _amer_lists(index, preds, cfg.ks, n_threads)
        if m_pred >= 2:
            extra["output_diversity"] = output_diversity(preds)
    else:
        q = seqmodel.decode(params, mcfg, dataset.inputs, 1)[:, 0]
        if mode == SINGLE_QUERY:
            ids, sims = index.search_arrays(q, max(cfg.ks), n_threads)
            merged = {k: list(ids) for k in cfg.ks}
        else:
            if val_dataset is None or len(val_dataset) == 0:
                lam = cfg.lambdas[0]
            else:
                _check_ids(index, val_dataset.target_ids)
                lam = _tune_lambda(params, mcfg, val_dataset, index, cfg, n_threads)
            lists = _mmr_lists(index, q, lam, cfg.mmr_depth, max(cfg.ks), n_threads)
            merged = {k: lists for k in cfg.ks}
            extra["mmr_lambda"] = float(lam)
    report = score_lists(merged, dataset.target_ids, stat, bins, cfg, mode,
                         query_ids=dataset.query_ids, **extra)
    if not return_lists:
        return report
    # fused and re-ranked lists carry rank-based scores; direct search keeps similarities
    scores = list(sims) if mode == SINGLE_QUERY else [1.0 / (1.0 + np.arange(len(i)))
                                                       for i in merged[max(cfg.ks)]]
    lists = [RankedList(np.asarray(ids), sc, int(q))
             for ids, sc, q in zip(merged[max(cfg.ks)], scores, dataset.query_ids)]
    return report, lists


# -------------------------------------------------------- external run files


def read_targets(path) -> dict:
    """Parse ``query_id m target_id...`` lines into ``{query_id: [ids]}``."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                m = int(parts[1])
                ids = [int(x) for x in parts[2:]]
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if len(ids) != m:
                raise FormatError(f"{path}:{lineno}: declared {m} targets, found {len(ids)}")
            out[parts[0]] = ids
    return out


def write_targets(path, query_ids, target_ids):
    with atomic_open(path, "w") as fh:
        for q, t in zip(query_ids, target_ids):
            fh.write(f"{q} {len(t)} " + " ".join(str(int(x)) for x in t) + "\n")


def evaluate_run(run: dict, targets: dict, corpus_vectors, cfg: EvalConfig,
                 mode: str = "external") -> EvalReport:
    """Score an ingested run file; bins come from the corpus vectors of each query's targets."""
    cfg.validate()
    qids = [q for q in targets if q in run]
    if not qids:
        raise MissingCorpusIds("no query in the run file has targets")
    m = {len(targets[q]) for q in qids}
    if len(m) != 1:
        raise FormatError("all queries must have the same number of targets")
    tids = np.array([targets[q] for q in qids], dtype=np.int64)
    vectors = np.asarray(corpus_vectors)
    if tids.min() < 0 or tids.max() >= len(vectors):
        raise MissingCorpusIds("target ids fall outside the corpus")
    stat, bins = diversity_bins(vectors[tids], cfg.metric, cfg.bins)
    lists = [run[q].ids for q in qids]
    merged = {k: lists for k in cfg.ks}
    return score_lists(merged, tids, stat, bins, cfg, mode, query_ids=qids,
                       target_diversity=mean_pairwise_similarity(vectors[tids]))
