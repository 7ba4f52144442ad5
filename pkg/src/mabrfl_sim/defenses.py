"""Baseline aggregation rules.

Every rule takes ``updates`` as a mapping from client id to a flat update
vector and returns one aggregate vector. Clients are always visited in
ascending id order so tie-breaking never depends on dict insertion order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.spatial.distance import cdist

from .linalg import RngStream, top_right_singular_vectors

DEFENSE_IDS = ("fedavg", "krum", "faba", "median", "dnc", "cc", "mabrfl")

Updates = Mapping[int, np.ndarray]


@dataclass(frozen=True)
class DefenseParams:
    """Tuning knobs of the baseline rules.

    ``krum_f`` of ``None`` means "the number of controlled clients", which
    the simulator fills in per run.
    """

    krum_f: int | None = None
    faba_fraction: float = 0.3
    dnc_beta: float = 0.2
    dnc_subsample_dim: int = 1000
    dnc_iters: int = 3
    cc_tau: float = 10.0
    cc_iters: int = 1
    cc_warm_start: bool = True

    def __post_init__(self) -> None:
        for name in ("faba_fraction", "dnc_beta"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")
        if self.cc_tau <= 0:
            raise ValueError("cc_tau must be positive")
        if self.krum_f is not None and self.krum_f < 0:
            raise ValueError("krum_f must be nonnegative")


def _stack(updates: Updates) -> tuple[list[int], np.ndarray]:
    if not updates:
        raise ValueError("no updates to aggregate")
    ids = sorted(updates)
    mat = np.vstack([np.asarray(updates[i], dtype=np.float64) for i in ids])
    return ids, mat


def fedavg(updates: Updates, weights: Mapping[int, float]) -> np.ndarray:
    """Weighted sum of updates; weights are the clients' data proportions."""
    if set(updates) != set(weights):
        raise ValueError("weights and updates must cover the same client ids")
    ids, mat = _stack(updates)
    w = np.array([weights[i] for i in ids], dtype=np.float64)
    return w @ mat


def mean(updates: Updates) -> np.ndarray:
    _, mat = _stack(updates)
    return mat.mean(axis=0)


def krum_scores(updates: Updates, f: int) -> dict[int, float]:
    ids, mat = _stack(updates)
    n = len(ids)
    if n < f + 3:
        raise ValueError(f"krum needs at least f + 3 = {f + 3} updates, got {n}")
    sq = cdist(mat, mat, "sqeuclidean")
    n_neighbors = n - f - 2
    scores = {}
    for row, cid in enumerate(ids):
        others = np.sort(np.delete(sq[row], row))
        scores[cid] = float(others[:n_neighbors].sum())
    return scores


def krum(updates: Updates, f: int) -> np.ndarray:
    """Return the update closest to its ``K' - f - 2`` nearest neighbours."""
    scores = krum_scores(updates, f)
    best = min(sorted(scores), key=lambda cid: scores[cid])
    return np.array(updates[best], dtype=np.float64)


def faba(updates: Updates, fraction: float) -> np.ndarray:
    """Repeatedly drop the update farthest from the running mean."""
    ids, mat = _stack(updates)
    n_remove = math.floor(fraction * len(ids))
    if n_remove >= len(ids):
        raise ValueError("faba would remove every update")
    keep = list(range(len(ids)))
    for _ in range(n_remove):
        center = mat[keep].mean(axis=0)
        dist = np.linalg.norm(mat[keep] - center, axis=1)
        # argmax returns the first maximum, i.e. the lowest id
        keep.pop(int(np.argmax(dist)))
    return mat[keep].mean(axis=0)


def median(updates: Updates) -> np.ndarray:
    _, mat = _stack(updates)
    return np.median(mat, axis=0)


def dnc(
    updates: Updates,
    beta: float,
    subsample_dim: int,
    iters: int,
    rng: RngStream,
) -> np.ndarray:
    """Spectral outlier filter over random coordinate subsets.

    In each iteration the centered sub-vectors are scored by their squared
    projection on the top right singular vector and the ``ceil(beta * K')``
    highest scores are marked (ties mark the higher id). Clients marked in a
    strict majority of iterations are dropped before averaging.
    """
    ids, mat = _stack(updates)
    n, d = mat.shape
    if n < 3:
        raise ValueError("dnc needs at least 3 updates")
    sub_dim = min(subsample_dim, d)
    n_mark = math.ceil(beta * n)
    marks = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        coords = np.sort(rng.choice(d, size=sub_dim, replace=False))
        sub = mat[:, coords]
        centered = sub - sub.mean(axis=0)
        top, _ = top_right_singular_vectors(centered, 1)
        scores = (centered @ top[0]) ** 2
        order = sorted(range(n), key=lambda r: (-scores[r], -ids[r]))
        marks[order[:n_mark]] += 1
    keep = marks * 2 <= iters
    if not np.any(keep):
        return np.median(mat, axis=0)
    return mat[keep].mean(axis=0)


def _clip(x: np.ndarray, tau: float) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    scale = np.minimum(1.0, tau / np.where(norms == 0.0, np.inf, norms))
    return x * scale


def centered_clip(
    updates: Updates,
    tau: float,
    iters: int,
    center: np.ndarray | None = None,
) -> np.ndarray:
    """Iterative centered clipping starting from ``center`` (zero by default)."""
    _, mat = _stack(updates)
    v = np.zeros(mat.shape[1]) if center is None else np.array(center, dtype=np.float64)
    for _ in range(iters):
        v = v + _clip(mat - v, tau).mean(axis=0)
    return v


class BaselineAggregator:
    """Dispatches a defense id to its rule, carrying CC's warm-start center."""

    def __init__(self, defense: str, params: DefenseParams, rng: RngStream, krum_f: int = 0):
        if defense not in DEFENSE_IDS or defense == "mabrfl":
            raise ValueError(f"unknown baseline defense {defense!r}")
        self.defense = defense
        self.params = params
        self.rng = rng
        self.krum_f = params.krum_f if params.krum_f is not None else krum_f
        self._last: np.ndarray | None = None

    def __call__(self, updates: Updates, weights: Mapping[int, float]) -> np.ndarray:
        p = self.params
        if self.defense == "fedavg":
            out = fedavg(updates, weights)
        elif self.defense == "krum":
            out = krum(updates, min(self.krum_f, max(len(updates) - 3, 0)))
        elif self.defense == "faba":
            out = faba(updates, p.faba_fraction)
        elif self.defense == "median":
            out = median(updates)
        elif self.defense == "dnc":
            out = dnc(updates, p.dnc_beta, p.dnc_subsample_dim, p.dnc_iters, self.rng)
        else:
            center = self._last if p.cc_warm_start else None
            out = centered_clip(updates, p.cc_tau, p.cc_iters, center)
        self._last = out
        return out
