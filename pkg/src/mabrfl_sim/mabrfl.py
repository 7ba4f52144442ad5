"""Bandit-driven robust aggregation.

One round selects clients by Thompson-style sampling of their reputation,
discards sybil groups (clusters of near-parallel updates) and then a
dissenting minority of momentum vectors, rewards or penalises every
selected client, and finally averages the surviving normalized momenta
scaled by the mean raw update norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, MutableMapping, Sequence

import numpy as np

from .linalg import RngStream, cosine, cosine_matrix, normalize, pca_project

UpdateProvider = Callable[[Sequence[int]], Mapping[int, np.ndarray]]


@dataclass
class ClientRecord:
    benign_count: int = 1
    malicious_count: int = 1
    momentum: np.ndarray | None = field(default=None, repr=False)
    last_round: int | None = None

    def __post_init__(self) -> None:
        if self.benign_count < 1 or self.malicious_count < 1:
            raise ValueError("reputation counts start at 1")
        if (self.momentum is None) != (self.last_round is None):
            raise ValueError("momentum and last_round must be set together")


@dataclass(frozen=True)
class MabRflParams:
    c_max: float = 0.7
    c_min: float = 0.3
    alpha: float = -0.1
    lam: float = 0.1
    decay_scale: float = 20.0
    pca_components: int = 2
    empty_selection_prob: float = 0.5

    def __post_init__(self) -> None:
        if not -1.0 < self.c_min < self.c_max < 1.0:
            raise ValueError("need -1 < c_min < c_max < 1")
        if not -1.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [-1, 1]")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lambda must lie in (0, 1)")
        if self.decay_scale <= 0 or self.pca_components < 1:
            raise ValueError("decay_scale and pca_components must be positive")
        if not 0.0 < self.empty_selection_prob < 1.0:
            raise ValueError("empty_selection_prob must lie in (0, 1)")


@dataclass(frozen=True)
class SybilGraph:
    vertices: tuple[int, ...]
    edges: frozenset[tuple[int, int]]

    def components(self) -> list[list[int]]:
        """Connected components, each sorted, ordered by smallest member."""
        parent = {v: v for v in self.vertices}

        def find(v: int) -> int:
            while parent[v] != v:
                parent[v] = parent[parent[v]]
                v = parent[v]
            return v

        for a, b in sorted(self.edges):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        groups: dict[int, list[int]] = {}
        for v in sorted(self.vertices):
            groups.setdefault(find(v), []).append(v)
        return sorted(groups.values(), key=lambda g: g[0])


@dataclass(frozen=True)
class ClusterSplit:
    larger: tuple[int, ...]
    smaller: tuple[int, ...]
    mean_larger: np.ndarray
    mean_smaller: np.ndarray


@dataclass
class MabRflRound:
    """Everything that happened in one round, for logging and tests."""

    round: int
    selected: list[int]
    dropped: list[int]
    flagged_sybil: list[int]
    flagged_nonsybil: list[int]
    survivors: list[int]
    eta: float
    delta: np.ndarray = field(repr=False)


def init_records(client_ids: Sequence[int]) -> dict[int, ClientRecord]:
    return {cid: ClientRecord() for cid in client_ids}


def select_clients(records: Mapping[int, ClientRecord], rng: RngStream, empty_selection_prob: float = 0.5) -> list[int]:
    """Include each client with a probability drawn from Beta(B_k, M_k).

    If nobody is picked, fall back to independent inclusion with
    ``empty_selection_prob`` until the subset is nonempty.
    """
    if not records:
        raise ValueError("no clients to select from")
    ids = sorted(records)
    selected = []
    for cid in ids:
        rec = records[cid]
        p = rng.beta(rec.benign_count, rec.malicious_count)
        if rng.random() < p:
            selected.append(cid)
    while not selected:
        selected = [cid for cid in ids if rng.random() < empty_selection_prob]
    return selected


def edge_threshold(t: int, params: MabRflParams) -> float:
    return max(params.c_max * math.exp((1 - t) / params.decay_scale), params.c_min)


def build_sybil_graph(updates: Mapping[int, np.ndarray], threshold: float) -> SybilGraph:
    ids = sorted(updates)
    edges: set[tuple[int, int]] = set()
    if len(ids) > 1:
        sims = cosine_matrix(np.vstack([updates[i] for i in ids]))
        rows, cols = np.nonzero(np.triu(sims >= threshold, k=1))
        edges = {(ids[r], ids[c]) for r, c in zip(rows, cols)}
    return SybilGraph(tuple(ids), frozenset(edges))


def identify_sybil(updates: Mapping[int, np.ndarray], t: int, params: MabRflParams) -> set[int]:
    """Flag every largest connected component (size >= 2) of the similarity graph.

    Zero-norm updates carry no direction and are flagged outright.
    """
    zero = {cid for cid, g in updates.items() if not np.any(g)}
    live = {cid: g for cid, g in updates.items() if cid not in zero}
    flagged = set(zero)
    if len(live) < 2:
        return flagged
    comps = build_sybil_graph(live, edge_threshold(t, params)).components()
    biggest = max(len(c) for c in comps)
    if biggest >= 2:
        for comp in comps:
            if len(comp) == biggest:
                flagged.update(comp)
    return flagged


def momentum_update(record: ClientRecord, g: np.ndarray, t: int, params: MabRflParams) -> np.ndarray:
    """Staleness-discounted momentum: g + lam**(t - t_k) * m_{t_k}."""
    g = np.asarray(g, dtype=np.float64)
    if record.momentum is None:
        return g.copy()
    return g + params.lam ** (t - record.last_round) * record.momentum


def average_linkage_split(points: np.ndarray) -> list[list[int]]:
    """Bottom-up average-linkage clustering, stopped at two clusters.

    Returns two lists of row indices. Among equally close cluster pairs the
    one listed first (by smallest member) is merged.
    """
    n = points.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points to split")
    dist = np.sqrt(np.maximum(np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2), 0.0))
    clusters = [[i] for i in range(n)]
    size = [1] * n
    d = dist.copy()
    active = list(range(n))
    np.fill_diagonal(d, np.inf)
    while len(active) > 2:
        best = (np.inf, -1, -1)
        for ai, a in enumerate(active):
            for b in active[ai + 1 :]:
                if d[a, b] < best[0]:
                    best = (d[a, b], a, b)
        _, a, b = best
        # Lance-Williams update for average linkage
        for c in active:
            if c not in (a, b):
                merged = (size[a] * d[a, c] + size[b] * d[b, c]) / (size[a] + size[b])
                d[a, c] = d[c, a] = merged
        clusters[a].extend(clusters[b])
        size[a] += size[b]
        active.remove(b)
    return [sorted(clusters[a]) for a in active]


def split_clusters(
    ids: Sequence[int],
    features: np.ndarray,
    raw_momenta: Mapping[int, np.ndarray],
) -> ClusterSplit:
    groups = [[ids[i] for i in grp] for grp in average_linkage_split(features)]
    # larger cluster first; equal sizes -> the one holding the lowest id
    groups.sort(key=lambda g: (-len(g), min(g)))
    big, small = groups
    return ClusterSplit(
        tuple(big),
        tuple(small),
        np.mean([raw_momenta[i] for i in big], axis=0),
        np.mean([raw_momenta[i] for i in small], axis=0),
    )


def identify_non_sybil(
    updates: Mapping[int, np.ndarray],
    records: Mapping[int, ClientRecord],
    t: int,
    params: MabRflParams,
) -> tuple[set[int], dict[int, np.ndarray], dict[int, np.ndarray]]:
    """Momentum clustering test for a dissenting minority.

    Returns the flagged ids, the normalized momenta and the raw momenta of
    every input client. A zero momentum has no direction and is flagged.
    """
    ids = sorted(updates)
    raw = {cid: momentum_update(records[cid], updates[cid], t, params) for cid in ids}
    flagged = {cid for cid in ids if not np.any(raw[cid])}
    live = [cid for cid in ids if cid not in flagged]
    unit = {cid: normalize(raw[cid]) for cid in live}
    if len(live) < 2:
        return flagged, unit, raw

    feats = pca_project(np.vstack([unit[cid] for cid in live]), params.pca_components)
    split = split_clusters(live, feats, raw)
    if not np.any(split.mean_larger) or not np.any(split.mean_smaller):
        return flagged, unit, raw
    if cosine(split.mean_larger, split.mean_smaller) <= params.alpha:
        flagged.update(split.smaller)
    return flagged, unit, raw


def distribute_rewards(
    records: MutableMapping[int, ClientRecord],
    selected: Sequence[int],
    flagged_sybil: set[int],
    flagged_nonsybil: set[int],
) -> MutableMapping[int, ClientRecord]:
    bad = flagged_sybil | flagged_nonsybil
    for cid in bad:
        records[cid].malicious_count += 1
    for cid in selected:
        if cid not in bad:
            records[cid].benign_count += 1
    return records


def aggregate(
    survivor_updates: Mapping[int, np.ndarray],
    survivor_unit_momenta: Mapping[int, np.ndarray],
) -> tuple[float, np.ndarray]:
    """Step size is the mean raw update norm; direction the mean unit momentum."""
    if not survivor_updates:
        raise ValueError("need at least one surviving client")
    ids = sorted(survivor_updates)
    eta = float(np.mean([np.linalg.norm(survivor_updates[i]) for i in ids]))
    direction = np.mean([survivor_unit_momenta[i] for i in ids], axis=0)
    return eta, eta * direction


def mabrfl_round(
    records: MutableMapping[int, ClientRecord],
    t: int,
    update_provider: UpdateProvider,
    params: MabRflParams,
    rng: RngStream,
) -> tuple[MabRflRound, MutableMapping[int, ClientRecord]]:
    """Run one full round and mutate ``records`` in place.

    ``update_provider`` receives the selected ids and returns their updates;
    ids missing from its result (or with non-finite updates) count as
    dropouts and are treated as not selected.
    """
    chosen = select_clients(records, rng, params.empty_selection_prob)
    received = update_provider(chosen)
    updates = {
        cid: np.asarray(received[cid], dtype=np.float64)
        for cid in chosen
        if cid in received and np.all(np.isfinite(received[cid]))
    }
    selected = sorted(updates)
    dropped = [cid for cid in chosen if cid not in updates]

    sybil = identify_sybil(updates, t, params) if updates else set()
    remaining = {cid: g for cid, g in updates.items() if cid not in sybil}
    nonsybil, unit, raw = identify_non_sybil(remaining, records, t, params) if remaining else (set(), {}, {})
    survivors = [cid for cid in selected if cid not in sybil and cid not in nonsybil]

    distribute_rewards(records, selected, sybil, nonsybil)
    for cid in survivors:
        records[cid].momentum = raw[cid]
        records[cid].last_round = t

    if survivors:
        eta, delta = aggregate({c: updates[c] for c in survivors}, {c: unit[c] for c in survivors})
    else:
        dim = next(iter(received.values())).shape[0] if received else 0
        eta, delta = 0.0, np.zeros(dim)
    outcome = MabRflRound(t, selected, dropped, sorted(sybil), sorted(nonsybil), survivors, eta, delta)
    return outcome, records
