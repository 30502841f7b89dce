"""Optimal prediction-to-target matching (Kuhn-Munkres) and its brute-force oracle."""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np

from amerlab import kernels
from amerlab.errors import CountMismatch, DimMismatch, NonFinite, ShapeMismatch, TooLarge


@dataclass(frozen=True)
class Matching:
    """``perm[i]`` is the target index assigned to prediction ``i``."""

    perm: tuple
    total: float


def _check_cost(cost):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeMismatch(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NonFinite("cost matrix contains non-finite entries")
    return cost


def _total(cost, perm):
    total = 0.0
    for i, j in enumerate(perm):
        total += float(cost[i, j])
    return total


def hungarian(cost) -> Matching:
    """Minimum-cost perfect matching of a square matrix in O(m^3)."""
    cost = _check_cost(cost)
    if cost.shape[0] == 0:
        return Matching((), 0.0)
    perm = tuple(int(j) for j in kernels.hungarian_batch(cost[None])[0])
    return Matching(perm, _total(cost, perm))


def hungarian_batch(costs) -> np.ndarray:
    """Assignments for a stack of (m, m) problems; returns int64 (B, m)."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 3 or costs.shape[1] != costs.shape[2]:
        raise ShapeMismatch(f"expected (B, m, m) costs, got {costs.shape}")
    if not np.all(np.isfinite(costs)):
        raise NonFinite("cost matrices contain non-finite entries")
    return kernels.hungarian_batch(costs)


@functools.lru_cache(maxsize=None)
def _all_perms(m):
    return np.array(list(itertools.permutations(range(m))), dtype=np.int64).reshape(-1, m)


def brute_force_match(cost) -> Matching:
    """Exhaustive search over all m! permutations (m <= 9)."""
    cost = _check_cost(cost)
    m = cost.shape[0]
    if m > 9:
        raise TooLarge(f"brute force limited to m <= 9, got {m}")
    if m == 0:
        return Matching((), 0.0)
    perms = _all_perms(m)
    sums = np.zeros(len(perms))
    for i in range(m):  # row order, like the reported total
        sums += cost[i, perms[:, i]]
    best = tuple(int(j) for j in perms[int(np.argmin(sums))])
    return Matching(best, _total(cost, best))


def match_predictions(preds, targets) -> Matching:
    """Match unit predictions to unit targets by maximal total cosine similarity.

    The cost is ``-sim``; the InfoNCE denominator of a prediction does not
    depend on which target it is paired with, and the temperature is a
    positive rescale, so this argmin equals the full matched-loss argmin.
    """
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if preds.shape[0] != targets.shape[0]:
        raise CountMismatch(f"{preds.shape[0]} predictions vs {targets.shape[0]} targets")
    if preds.shape[1] != targets.shape[1]:
        raise DimMismatch(f"dimension {preds.shape[1]} vs {targets.shape[1]}")
    cost = -np.clip(preds @ targets.T, -1.0, 1.0)
    return hungarian(cost)
