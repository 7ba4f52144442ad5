"""Numerical kernel shared by every other module.

Vectors are 1-D float64 numpy arrays, matrices are 2-D arrays with one
row per client. All randomness is drawn from an explicitly passed
``numpy.random.Generator``; nothing here touches global RNG state.
"""

from __future__ import annotations

import math
from statistics import NormalDist
from typing import Sequence

import numpy as np

RngStream = np.random.Generator

_STD_NORMAL = NormalDist()


class DegenerateVectorError(ValueError):
    """Raised when an operation needs a vector with nonzero norm."""


def make_rng(seed: int) -> RngStream:
    """Return a fresh, reproducible random stream for ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def split_rng(rng: RngStream, n: int) -> list[RngStream]:
    """Derive ``n`` independent child streams from ``rng``.

    Children are seeded from draws of the parent, so the parent advances
    deterministically and the children never share state with it.
    """
    seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    return [make_rng(int(s)) for s in seeds]


def as_vector(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Copy ``values`` into a read-only finite float64 vector."""
    vec = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(vec)):
        raise ValueError("vector contains NaN or Inf")
    vec.setflags(write=False)
    return vec


def l2_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two nonzero vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = l2_norm(a)
    nb = l2_norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    return float(min(1.0, max(-1.0, float(a @ b) / (na * nb))))


def cosine_matrix(rows: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities of the rows of ``rows`` (all nonzero)."""
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    unit = rows / norms[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def normalize(a: np.ndarray) -> np.ndarray:
    norm = l2_norm(a)
    if norm == 0.0:
        raise DegenerateVectorError("cannot normalize the zero vector")
    return np.asarray(a, dtype=np.float64) / norm


def top_right_singular_vectors(centered: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``k`` right singular vectors and singular values of ``centered``.

    Works on whichever of the Gram matrix (n x n) or the scatter matrix
    (d x d) is smaller, so a handful of very long update vectors stays cheap.
    Each returned vector has its largest-magnitude entry made nonnegative.
    Directions with a numerically zero singular value come back as zero
    vectors with singular value 0.

    Returns:
        (vectors, singular_values) with shapes (k, d) and (k,).
    """
    x = np.asarray(centered, dtype=np.float64)
    n, d = x.shape
    if n <= d:
        evals, evecs = np.linalg.eigh(x @ x.T)
    else:
        evals, evecs = np.linalg.eigh(x.T @ x)
    order = np.argsort(evals, kind="stable")[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]

    scale = evals[0] if evals.size else 0.0
    vectors = np.zeros((k, d))
    singular = np.zeros(k)
    for i in range(min(k, evals.size)):
        if scale == 0.0 or evals[i] <= 1e-12 * scale:
            break
        s = math.sqrt(evals[i])
        v = x.T @ evecs[:, i] / s if n <= d else evecs[:, i]
        v = v / np.linalg.norm(v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        vectors[i] = v
        singular[i] = s
    return vectors, singular


def pca_project(rows: np.ndarray, n_components: int) -> np.ndarray:
    """Coordinates of the mean-centered rows in their top principal directions.

    Requests beyond the numerical rank are zero-padded.

    Raises:
        ValueError: fewer than two rows.
    """
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca_project needs at least 2 rows")
    if n_components < 1:
        raise ValueError("n_components must be positive")
    centered = x - x.mean(axis=0)
    basis, _ = top_right_singular_vectors(centered, n_components)
    return centered @ basis.T


def sample_beta(a: float, b: float, rng: RngStream) -> float:
    if a <= 0 or b <= 0:
        raise ValueError(f"Beta parameters must be positive, got ({a}, {b})")
    return float(rng.beta(a, b))


def std_normal_cdf(z: float) -> float:
    # erfc keeps relative precision in the lower tail
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def std_normal_cdf_inv(p: float) -> float:
    """Inverse of the standard normal CDF.

    A rational approximation refined by two Newton steps on ``std_normal_cdf``.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    z = _STD_NORMAL.inv_cdf(p)
    for _ in range(2):
        density = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        if density == 0.0:
            break
        z -= (std_normal_cdf(z) - p) / density
    return z


def coordinate_stats(updates: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and population standard deviation."""
    if len(updates) < 2:
        raise ValueError("coordinate_stats needs at least 2 vectors")
    stacked = np.vstack([np.asarray(u, dtype=np.float64) for u in updates])
    return stacked.mean(axis=0), stacked.std(axis=0)
