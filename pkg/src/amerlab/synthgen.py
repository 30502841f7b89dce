"""Synthetic multi-target retrieval data.

Each input vector ``x`` is mapped through five fixed transformations to give
``m`` targets. The corpus holds every (normalized) target of every query plus
random Gaussian distractors, in a seeded shuffled order.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from amerlab.errors import (ConfigError, CorpusTooSmall, DimMismatch, FormatError,
                            OrthogonalizationFailed)
from amerlab.fileio import Reader, atomic_open, pack_string
from amerlab.tensor_core import RngStream, as_rng, gelu, normalize, sample_rotation

DATASET_MAGIC = b"AMER"
CORPUS_MAGIC = b"AMERCORP"
TRANSFORM_MAGIC = b"AMERXFRM"
FORMAT_VERSION = 1

N_TRANSFORMS = 5
ORTHO_TOL = 0.05
ORTHO_MAX_ATTEMPTS = 1000
_DISTRACTOR_CHUNK = 4096


class Dist(enum.IntEnum):
    STANDARD_GAUSSIAN = 0
    HIGH_VAR_GAUSSIAN = 1
    CORRELATED_GAUSSIAN = 2
    UNIFORM_CUBE = 3
    LAPLACE_PLUS_GAUSSIAN = 4


class Setting(enum.IntEnum):
    SINGLE = 0
    MULTI = 1
    OOD = 2


class TransformKind(enum.IntEnum):
    LINEAR = 0
    MLP = 1


class Split(enum.IntEnum):
    TRAIN = 0
    VAL = 1
    TEST = 2


SETTING_NAMES = {"single": Setting.SINGLE, "multi": Setting.MULTI, "ood": Setting.OOD}
KIND_NAMES = {"linear": TransformKind.LINEAR, "mlp": TransformKind.MLP}


def parse_setting(s) -> Setting:
    if isinstance(s, Setting):
        return s
    try:
        return SETTING_NAMES[str(s).lower()]
    except KeyError:
        raise ConfigError(f"unknown setting {s!r}; expected one of {sorted(SETTING_NAMES)}") from None


def parse_kind(s) -> TransformKind:
    if isinstance(s, TransformKind):
        return s
    try:
        return KIND_NAMES[str(s).lower()]
    except KeyError:
        raise ConfigError(f"unknown transform {s!r}; expected one of {sorted(KIND_NAMES)}") from None


@dataclass
class InputDistribution:
    kind: Dist
    # Cholesky factor of the correlated-Gaussian covariance, when relevant
    chol: np.ndarray | None = None

    HIGH_VAR = 4.0
    CUBE = 2.0
    LAPLACE_SCALE = 1.0
    NOISE_VAR = 0.1


def correlated_covariance(d: int, rng) -> np.ndarray:
    """``0.5 A A^T + 0.1 I`` with ``A_ij ~ N(0, 1/d)``."""
    a = as_rng(rng).standard_normal((d, d)) / np.sqrt(d)
    return 0.5 * a @ a.T + 0.1 * np.eye(d)


def make_distributions(d: int, rng) -> list[InputDistribution]:
    cov = correlated_covariance(d, rng)
    chol = np.linalg.cholesky(cov)
    return [
        InputDistribution(Dist.STANDARD_GAUSSIAN),
        InputDistribution(Dist.HIGH_VAR_GAUSSIAN),
        InputDistribution(Dist.CORRELATED_GAUSSIAN, chol=chol),
        InputDistribution(Dist.UNIFORM_CUBE),
        InputDistribution(Dist.LAPLACE_PLUS_GAUSSIAN),
    ]


def sample_inputs(dist: InputDistribution, n: int, d: int, rng) -> np.ndarray:
    """Draw ``n`` raw (unnormalized) vectors from ``dist`` as float64 (n, d)."""
    if n < 1 or d < 2:
        raise ValueError("need n >= 1 and d >= 2")
    g = as_rng(rng)
    k = dist.kind
    if k == Dist.STANDARD_GAUSSIAN:
        return g.standard_normal((n, d))
    if k == Dist.HIGH_VAR_GAUSSIAN:
        return np.sqrt(dist.HIGH_VAR) * g.standard_normal((n, d))
    if k == Dist.CORRELATED_GAUSSIAN:
        if dist.chol is None or dist.chol.shape != (d, d):
            raise DimMismatch("correlated Gaussian needs a (d, d) Cholesky factor")
        return g.standard_normal((n, d)) @ dist.chol.T
    if k == Dist.UNIFORM_CUBE:
        return g.uniform(-dist.CUBE, dist.CUBE, size=(n, d))
    if k == Dist.LAPLACE_PLUS_GAUSSIAN:
        lap = g.laplace(0.0, dist.LAPLACE_SCALE, size=(n, d))
        return lap + np.sqrt(dist.NOISE_VAR) * g.standard_normal((n, d))
    raise ValueError(f"unknown distribution {k!r}")


@dataclass
class TransformSpec:
    kind: TransformKind
    index: int  # 1-based
    weights: tuple  # (T,) for linear, (W1, W2) for MLP

    def apply(self, x):
        return apply_transform(self, x)


def apply_transform(spec: TransformSpec, x) -> np.ndarray:
    """Apply to a vector (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    w = spec.weights[0]
    if x.shape[-1] != w.shape[1]:
        raise DimMismatch(f"input dim {x.shape[-1]} vs transform dim {w.shape[1]}")
    if spec.kind == TransformKind.LINEAR:
        return x @ w.T
    w1, w2 = spec.weights
    return gelu(x @ w1.T) @ w2.T


def frobenius_overlap(a, b) -> float:
    """``|<A, B>_F| / d``."""
    return abs(float(np.sum(a * b))) / a.shape[0]


def _orthogonal_rotation(d, accepted, rng: RngStream, label: int):
    for attempt in range(ORTHO_MAX_ATTEMPTS):
        r = sample_rotation(d, rng.derive("transforms", label, attempt))
        if all(frobenius_overlap(r, a) < ORTHO_TOL for a in accepted):
            return r
    raise OrthogonalizationFailed(
        f"no rotation with Frobenius overlap < {ORTHO_TOL} after {ORTHO_MAX_ATTEMPTS} attempts"
    )


def make_transforms(kind, d: int, rng) -> list[TransformSpec]:
    """Build the five transformations for ``kind`` ("linear" or "mlp")."""
    kind = parse_kind(kind)
    if d < 2:
        raise ValueError("d must be >= 2")
    rng = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    if kind == TransformKind.LINEAR:
        ma = sample_rotation(d, rng.derive("transforms", 0, 0))
        mb = sample_rotation(d, rng.derive("transforms", 1, 0))
        mats = [np.eye(d), ma, mb, -ma, -mb]
        return [TransformSpec(kind, i + 1, (m,)) for i, m in enumerate(mats)]
    ma = sample_rotation(d, rng.derive("transforms", 0, 0))
    mb = _orthogonal_rotation(d, [ma], rng, 1)
    mc = _orthogonal_rotation(d, [ma, mb], rng, 2)
    mats = [ma, mb, mc, -mb, -mc]
    return [TransformSpec(kind, i + 1, (m, m.copy())) for i, m in enumerate(mats)]


@dataclass
class SyntheticDataset:
    """One split of generated records.

    ``inputs`` (n, d) and ``targets`` (n, m, d) are the raw float32 vectors;
    ``target_ids`` (n, m) index into the companion corpus; ``query_ids`` are
    global query numbers (train, then val, then test).
    """

    setting: Setting
    kind: TransformKind
    split: Split
    seed: int
    inputs: np.ndarray
    targets: np.ndarray
    target_ids: np.ndarray
    query_ids: np.ndarray
    dists: np.ndarray = field(default=None)

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def m(self) -> int:
        return self.targets.shape[1]

    def __len__(self):
        return self.inputs.shape[0]

    def unit_targets(self) -> np.ndarray:
        """Normalized targets, float64 (n, m, d)."""
        return normalize(self.targets.astype(np.float64))


@dataclass
class Corpus:
    """Unit vectors (n, d) float32 with provenance.

    ``tag_kind`` is 0 for a target, 1 for a distractor; ``tag_query`` and
    ``tag_slot`` identify the owning query and target slot for targets.
    """

    vectors: np.ndarray
    tag_kind: np.ndarray
    tag_query: np.ndarray
    tag_slot: np.ndarray

    TARGET = 0
    DISTRACTOR = 1

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]


def _dist_schedule(setting: Setting, n: int, split_is_test: bool) -> np.ndarray:
    idx = np.arange(n)
    if setting == Setting.SINGLE:
        return np.zeros(n, dtype=np.int64)
    if setting == Setting.MULTI:
        return idx % N_TRANSFORMS
    if split_is_test:
        return np.full(n, int(Dist.LAPLACE_PLUS_GAUSSIAN), dtype=np.int64)
    return idx % 4


def _draw_inputs(dists_for_queries, query_ids, distributions, d, rng: RngStream):
    out = np.empty((len(query_ids), d), dtype=np.float64)
    for row, (qid, di) in enumerate(zip(query_ids, dists_for_queries)):
        out[row] = sample_inputs(distributions[di], 1, d, rng.derive("inputs", qid))[0]
    return out


def val_count(n_train: int) -> int:
    if n_train < 2:
        return 0
    return max(1, int(round(0.1 * n_train)))


def build_dataset(setting, kind, n_train: int, n_test: int, d: int, m: int, rng,
                  transforms=None, normalize_inputs=False):
    """Generate train/val/test splits and the raw target pool.

    Returns ``(splits, pool, pool_tags, transforms, distributions)``. ``pool``
    is float64 (N, d) raw targets in (query, slot) order with ``pool_tags``
    (N, 2) giving the (query id, slot) of each row. Target ids in the splits
    are left at -1 until :func:`assign_target_ids` runs against a corpus.
    """
    setting = parse_setting(setting)
    kind = parse_kind(kind)
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    if not 2 <= m <= N_TRANSFORMS:
        raise ValueError(f"m must lie in [2, {N_TRANSFORMS}]")
    rng = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    if transforms is None:
        transforms = make_transforms(kind, d, rng)
    distributions = make_distributions(d, rng.derive("dist_params"))

    pool_dists = _dist_schedule(setting, n_train, False)
    test_dists = _dist_schedule(setting, n_test, True)
    train_q = np.arange(n_train)
    test_q = np.arange(n_train, n_train + n_test)
    x_pool = _draw_inputs(pool_dists, train_q, distributions, d, rng)
    x_test = _draw_inputs(test_dists, test_q, distributions, d, rng)
    x_all = np.concatenate([x_pool, x_test])
    if normalize_inputs:
        x_all = normalize(x_all)
    y_all = np.stack([apply_transform(t, x_all) for t in transforms[:m]], axis=1)

    n_val = val_count(n_train)
    n_tr = n_train - n_val
    bounds = {Split.TRAIN: (0, n_tr), Split.VAL: (n_tr, n_train), Split.TEST: (n_train, n_train + n_test)}
    dists_all = np.concatenate([pool_dists, test_dists])
    seed = rng.seed
    splits = {}
    for split, (lo, hi) in bounds.items():
        splits[split] = SyntheticDataset(
            setting=setting, kind=kind, split=split, seed=seed,
            inputs=x_all[lo:hi].astype(np.float32),
            targets=y_all[lo:hi].astype(np.float32),
            target_ids=np.full((hi - lo, m), -1, dtype=np.int64),
            query_ids=np.arange(lo, hi, dtype=np.int64),
            dists=dists_all[lo:hi].copy(),
        )
    pool = y_all.reshape(-1, d)
    qg, sg = np.meshgrid(np.arange(x_all.shape[0]), np.arange(m), indexing="ij")
    pool_tags = np.stack([qg.reshape(-1), sg.reshape(-1)], axis=1)
    return splits, pool, pool_tags, transforms, distributions


def build_corpus(pool, n_total: int, d: int, rng, pool_tags=None):
    """Corpus of normalized pool targets plus Gaussian distractors, shuffled.

    Returns ``(corpus, pool_ids)`` where ``pool_ids[i]`` is the corpus id of
    pool row ``i``.
    """
    pool = np.asarray(pool, dtype=np.float64)
    n_pool = pool.shape[0]
    if pool.ndim != 2 or pool.shape[1] != d:
        raise DimMismatch(f"pool must be (N, {d})")
    if n_total < n_pool:
        raise CorpusTooSmall(f"corpus size {n_total} < {n_pool} targets")
    rng = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    if pool_tags is None:
        pool_tags = np.stack([np.arange(n_pool), np.zeros(n_pool, dtype=np.int64)], axis=1)
    n_dis = n_total - n_pool
    chunks = []
    for c, lo in enumerate(range(0, n_dis, _DISTRACTOR_CHUNK)):
        size = min(_DISTRACTOR_CHUNK, n_dis - lo)
        chunks.append(rng.derive("corpus", c).generator().standard_normal((size, d)))
    distractors = np.concatenate(chunks) if chunks else np.empty((0, d))
    ordered = np.concatenate([normalize(pool), normalize(distractors)]) if n_dis else normalize(pool)

    perm = rng.derive("corpus_perm").generator().permutation(n_total)
    # perm[new_position] = old_position
    vectors = ordered[perm].astype(np.float32)
    kinds = np.concatenate([np.zeros(n_pool, np.uint8), np.ones(n_dis, np.uint8)])[perm]
    queries = np.concatenate([pool_tags[:, 0], np.zeros(n_dis, np.int64)])[perm].astype(np.uint64)
    slots = np.concatenate([pool_tags[:, 1], np.zeros(n_dis, np.int64)])[perm].astype(np.uint8)
    inverse = np.empty(n_total, dtype=np.int64)
    inverse[perm] = np.arange(n_total)
    corpus = Corpus(vectors=vectors, tag_kind=kinds, tag_query=queries, tag_slot=slots)
    return corpus, inverse[:n_pool]


def assign_target_ids(splits, pool_ids, m: int):
    ids = pool_ids.reshape(-1, m)
    for ds in splits.values():
        ds.target_ids = ids[ds.query_ids].astype(np.int64)


@dataclass
class GeneratedData:
    splits: dict
    corpus: Corpus
    transforms: list
    distributions: list


def generate(setting, kind, n_train, n_test, d, m, corpus_size, seed, normalize_inputs=False):
    """End-to-end generation of splits, corpus and transforms."""
    rng = RngStream(int(seed))
    splits, pool, tags, transforms, dists = build_dataset(
        setting, kind, n_train, n_test, d, m, rng, normalize_inputs=normalize_inputs
    )
    corpus, pool_ids = build_corpus(pool, corpus_size, d, rng, pool_tags=tags)
    assign_target_ids(splits, pool_ids, m)
    return GeneratedData(splits, corpus, transforms, dists)


# ---------------------------------------------------------------- file formats


def _record_dtype(d, m):
    target = np.dtype([("vec", "<f4", (d,)), ("id", "<u8")])
    return np.dtype([("input", "<f4", (d,)), ("targets", target, (m,))])


def write_dataset(path, ds: SyntheticDataset):
    n, m, d = ds.targets.shape
    header = DATASET_MAGIC + struct.pack(
        "<IIIQBBBQ", FORMAT_VERSION, d, m, n, int(ds.setting), int(ds.kind), int(ds.split),
        int(ds.seed) & (2**64 - 1),
    )
    rec = np.zeros(n, dtype=_record_dtype(d, m))
    rec["input"] = ds.inputs
    rec["targets"]["vec"] = ds.targets
    rec["targets"]["id"] = ds.target_ids.astype(np.uint64)
    with atomic_open(path) as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_dataset(path, first_query_id: int | None = None) -> SyntheticDataset:
    with open(path, "rb") as fh:
        r = Reader(fh.read(), f"dataset {path}")
    r.magic(DATASET_MAGIC)
    version, d, m, n, setting, kind, split, seed = r.unpack("IIIQBBBQ")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    rec = r.array(_record_dtype(d, m), n)
    r.done()
    qid0 = 0 if first_query_id is None else first_query_id
    return SyntheticDataset(
        setting=Setting(setting), kind=TransformKind(kind), split=Split(split), seed=seed,
        inputs=np.ascontiguousarray(rec["input"]),
        targets=np.ascontiguousarray(rec["targets"]["vec"]),
        target_ids=rec["targets"]["id"].astype(np.int64),
        query_ids=np.arange(qid0, qid0 + n, dtype=np.int64),
    )


_TAG_DTYPE = np.dtype([("kind", "u1"), ("query", "<u8"), ("slot", "u1")])


def write_corpus(path, corpus: Corpus):
    n, d = corpus.vectors.shape
    tags = np.zeros(n, dtype=_TAG_DTYPE)
    tags["kind"] = corpus.tag_kind
    tags["query"] = corpus.tag_query
    tags["slot"] = corpus.tag_slot
    with atomic_open(path) as fh:
        fh.write(CORPUS_MAGIC + struct.pack("<IQ", d, n))
        fh.write(np.ascontiguousarray(corpus.vectors, dtype="<f4").tobytes())
        fh.write(tags.tobytes())


def read_corpus(path) -> Corpus:
    with open(path, "rb") as fh:
        r = Reader(fh.read(), f"corpus {path}")
    r.magic(CORPUS_MAGIC)
    d, n = r.unpack("IQ")
    vectors = r.array("<f4", n * d).reshape(n, d)
    tags = r.array(_TAG_DTYPE, n)
    r.done()
    return Corpus(vectors=vectors, tag_kind=tags["kind"].copy(), tag_query=tags["query"].copy(),
                  tag_slot=tags["slot"].copy())


def write_transforms(path, transforms, distributions=()):
    kind = transforms[0].kind
    mats = []
    for t in transforms:
        names = ("T",) if t.kind == TransformKind.LINEAR else ("W1", "W2")
        mats += [(f"t{t.index}.{nm}", w) for nm, w in zip(names, t.weights)]
    for i, dist in enumerate(distributions):
        if dist.chol is not None:
            mats.append((f"dist{i}.chol", dist.chol))
    with atomic_open(path) as fh:
        fh.write(TRANSFORM_MAGIC + struct.pack("<IBI", FORMAT_VERSION, int(kind), len(mats)))
        for name, w in mats:
            w = np.ascontiguousarray(w, dtype="<f8")
            fh.write(pack_string(name) + struct.pack("<II", *w.shape))
            fh.write(w.tobytes())


def read_transforms(path):
    """Returns ``(transforms, extra)`` where ``extra`` maps other matrix names."""
    with open(path, "rb") as fh:
        r = Reader(fh.read(), f"transforms {path}")
    r.magic(TRANSFORM_MAGIC)
    version, kind, count = r.unpack("IBI")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported transform version {version}")
    kind = TransformKind(kind)
    mats = {}
    for _ in range(count):
        name = r.string()
        rows, cols = r.unpack("II")
        mats[name] = r.array("<f8", rows * cols).reshape(rows, cols)
    r.done()
    transforms = []
    for i in range(1, N_TRANSFORMS + 1):
        if kind == TransformKind.LINEAR:
            w = (mats.pop(f"t{i}.T"),)
        else:
            w = (mats.pop(f"t{i}.W1"), mats.pop(f"t{i}.W2"))
        transforms.append(TransformSpec(kind, i, w))
    return transforms, mats
