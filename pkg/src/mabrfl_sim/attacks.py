"""Byzantine attacks: label flipping, LIE and the aggregator-tailored attack."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import defenses
from .data import Dataset
from .linalg import RngStream, coordinate_stats, std_normal_cdf_inv

log = logging.getLogger(__name__)

ATTACK_IDS = ("none", "lf", "lie", "agrt")

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class AttackContext:
    """What the adversary controls and knows in one round.

    ``benign_updates_known`` holds the honest updates the adversary may use;
    ``total_selected`` is the number of clients participating this round.
    """

    controlled_ids: tuple[int, ...]
    benign_updates_known: Mapping[int, np.ndarray] = field(default_factory=dict)
    total_selected: int = 0


@dataclass(frozen=True)
class AgrtParams:
    gamma_max: float = 50.0
    search_iters: int = 40
    known_defense: str = "krum"
    krum_f: int | None = None
    defense_params: defenses.DefenseParams = field(default_factory=defenses.DefenseParams)

    def __post_init__(self) -> None:
        if self.gamma_max <= 0:
            raise ValueError("gamma_max must be positive")


@dataclass(frozen=True)
class ZmaxResult:
    zmax: float
    capped: bool


def label_flip(shard: Dataset) -> Dataset:
    """Map every label l to L - 1 - l; features are left alone."""
    L = shard.num_classes
    return Dataset(shard.features, L - 1 - shard.labels, L)


def lie_zmax(num_clients: int, m_divisor: int, cap: float = 3.0) -> ZmaxResult:
    """Largest z with Phi(z) below (K - floor(K/2 + 1)) / m.

    Ratios at or above 1 are unreachable for Phi and return ``cap`` with the
    ``capped`` flag set.
    """
    if m_divisor <= 0:
        raise ValueError("divisor must be positive")
    ratio = (num_clients - math.floor(num_clients / 2 + 1)) / m_divisor
    if ratio >= 1.0:
        log.debug("LIE ratio %.4f >= 1, using z_max cap %.2f", ratio, cap)
        return ZmaxResult(cap, True)
    ratio = max(ratio, 1e-12)
    return ZmaxResult(max(0.0, std_normal_cdf_inv(ratio)), False)


def lie_attack(ctx: AttackContext, zmax: float) -> dict[int, np.ndarray]:
    """Every controlled client sends mu - zmax * sigma of the known benign updates."""
    known = [ctx.benign_updates_known[i] for i in sorted(ctx.benign_updates_known)]
    if len(known) < 2:
        raise ValueError("LIE needs at least 2 known benign updates")
    mu, sigma = coordinate_stats(known)
    poisoned = mu - zmax * sigma
    poisoned.setflags(write=False)
    return {cid: poisoned for cid in ctx.controlled_ids}


# defenses the adversary can replay offline; anything else falls back to krum
EVALUABLE_DEFENSES = ("fedavg", "krum", "faba", "median", "cc")


def _known_aggregate(
    name: str,
    updates: Mapping[int, np.ndarray],
    krum_f: int,
    dp: defenses.DefenseParams,
) -> np.ndarray:
    if name == "krum":
        return defenses.krum(updates, max(0, min(krum_f, len(updates) - 3)))
    if name == "median":
        return defenses.median(updates)
    if name == "fedavg":
        return defenses.mean(updates)
    if name == "faba":
        return defenses.faba(updates, dp.faba_fraction)
    if name == "cc":
        return defenses.centered_clip(updates, dp.cc_tau, dp.cc_iters)
    raise ValueError(f"AGRT cannot evaluate defense {name!r}")


def agrt_objective(
    ctx: AttackContext,
    params: AgrtParams,
) -> tuple[np.ndarray, np.ndarray, Callable[[float], float]]:
    """Reference update, perturbation and the damage objective over gamma."""
    ids = sorted(ctx.benign_updates_known)
    known = [ctx.benign_updates_known[i] for i in ids]
    if len(known) < 2:
        raise ValueError("AGRT needs at least 2 known benign updates")
    ref, sigma = coordinate_stats(known)
    perturb = -sigma
    n_mal = max(1, len(ctx.controlled_ids))
    fake_ids = range(max(ids) + 1, max(ids) + 1 + n_mal)
    krum_f = n_mal if params.krum_f is None else params.krum_f

    def objective(gamma: float) -> float:
        poisoned = ref + gamma * perturb
        pool = dict(zip(ids, known))
        pool.update({fid: poisoned for fid in fake_ids})
        agg = _known_aggregate(params.known_defense, pool, krum_f, params.defense_params)
        return float(np.linalg.norm(ref - agg))

    return ref, perturb, objective


def golden_section_max(fn: Callable[[float], float], lo: float, hi: float, iters: int) -> float:
    """Golden-section search for a maximiser; the endpoints are also checked."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fn(d)
    candidates = [(fc, c), (fd, d), (fn(lo), lo), (fn(hi), hi)]
    best = max(v for v, _ in candidates)
    # prefer the smallest gamma among equal objective values
    return min(g for v, g in candidates if v == best)


def agrt_attack(ctx: AttackContext, params: AgrtParams, rng: RngStream) -> dict[int, np.ndarray]:
    """Aggregator-tailored attack with the half-sybil, half-copy split.

    The first ``ceil(c / 2)`` controlled ids (ascending) send the optimised
    poisoned update; the rest all send a copy of one benign update picked
    uniformly at random.
    """
    ref, perturb, objective = agrt_objective(ctx, params)
    gamma = golden_section_max(objective, 0.0, params.gamma_max, params.search_iters)
    poisoned = ref + gamma * perturb
    poisoned.setflags(write=False)

    controlled = sorted(ctx.controlled_ids)
    n_sybil = math.ceil(len(controlled) / 2)
    known_ids = sorted(ctx.benign_updates_known)
    copied = np.array(ctx.benign_updates_known[known_ids[int(rng.integers(len(known_ids)))]])
    copied.setflags(write=False)
    out = {cid: poisoned for cid in controlled[:n_sybil]}
    out.update({cid: copied for cid in controlled[n_sybil:]})
    return out
