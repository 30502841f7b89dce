"""Numerical substrate: seeded streams, normalization, GeLU, rotations, grad check.

Vectors are stored as float32 and reduced in float64. Random draws come from
numpy's Philox counter-based generator keyed by ``(seed, stream id)`` through
``SeedSequence`` spawn keys, so every (purpose, index) pair owns an
independent, schedule-free stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from amerlab.errors import DimMismatch, NonFiniteLoss, ZeroVector

RNG_ALGORITHM = "philox4x64"

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# stream purposes; the numeric code is part of the stream key, never reorder
PURPOSES = {
    "transforms": 1,
    "inputs": 2,
    "corpus": 3,
    "corpus_perm": 4,
    "dist_params": 5,
    "init": 10,
    "epoch": 11,
    "step": 12,
    "val": 13,
    "eval": 20,
    "test": 99,
}


@dataclass(frozen=True)
class RngStream:
    """Identifies one independent random stream.

    ``stream`` is any tuple of non-negative integers; use :meth:`derive` to
    build keys from a named purpose and an index.
    """

    seed: int
    stream: tuple = ()

    def derive(self, purpose, *index):
        code = PURPOSES[purpose] if isinstance(purpose, str) else int(purpose)
        return RngStream(self.seed, self.stream + (code,) + tuple(int(i) for i in index))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return RngStream(int(rng)).generator()


def normalize(v, axis=-1):
    """Scale ``v`` to unit Euclidean norm along ``axis`` (float64 result).

    Raises ZeroVector when any slice has norm below 1e-12.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    if np.any(norm < 1e-12):
        raise ZeroVector("cannot normalize a (near-)zero vector")
    return v / norm


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatch(f"dimensions differ: {a.shape} vs {b.shape}")
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def _float(x):
    x = np.asarray(x)
    return x if x.dtype in (np.float32, np.float64) else x.astype(np.float64)


def gelu(x):
    """Exact GeLU, ``x * Phi(x)``; float32 input stays float32."""
    x = _float(x)
    return 0.5 * x * (1.0 + erf(x * x.dtype.type(1.0 / _SQRT2)))


def gelu_grad(x):
    x = _float(x)
    t = x.dtype.type
    return 0.5 * (1.0 + erf(x * t(1.0 / _SQRT2))) + x * t(_INV_SQRT_2PI) * np.exp(t(-0.5) * x * x)


def sample_rotation(d: int, rng) -> np.ndarray:
    """Haar-distributed rotation in SO(d) from the QR of a Gaussian matrix."""
    if d < 2:
        raise ValueError("rotation dimension must be >= 2")
    g = as_rng(rng).standard_normal((d, d))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _wrap_bare(fn):
    def wrapped(p):
        loss, g = fn(p["x"])
        return loss, {"x": g}

    return wrapped


def grad_check(loss_fn, params, epsilon=1e-5, samples=50, rng=0):
    """Compare analytic gradients against central finite differences.

    ``loss_fn(params) -> (loss, grads)`` where ``params`` and ``grads`` are
    dicts of float64 arrays (a bare array is wrapped as ``{"x": array}``).
    ``samples`` coordinates are drawn uniformly over all parameters. Returns
    the maximum of ``|g - g_fd| / max(1e-8, |g| + |g_fd|)``.
    """
    if not 1e-5 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-5, 1e-3]")
    if not isinstance(params, dict):
        params = {"x": np.asarray(params, dtype=np.float64).copy()}
        loss_fn = _wrap_bare(loss_fn)

    loss0, grads = loss_fn(params)
    grads = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
    if not np.isfinite(loss0):
        raise NonFiniteLoss("loss is not finite at the supplied parameters")
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    gen = as_rng(rng)
    flat_idx = gen.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for fi in np.sort(flat_idx):
        which = int(np.searchsorted(offsets, fi, side="right") - 1)
        name = names[which]
        local = int(fi - offsets[which])
        arr = params[name].reshape(-1)
        orig = arr[local]
        arr[local] = orig + epsilon
        lp, _ = loss_fn(params)
        arr[local] = orig - epsilon
        lm, _ = loss_fn(params)
        arr[local] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteLoss("loss became non-finite during the finite-difference probe")
        g_fd = (lp - lm) / (2.0 * epsilon)
        g_an = float(np.asarray(grads[name]).reshape(-1)[local])
        rel = abs(g_an - g_fd) / max(1e-8, abs(g_an) + abs(g_fd))
        worst = max(worst, rel)
    return worst
