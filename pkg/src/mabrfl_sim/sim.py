"""Experiment orchestration: configuration, the round loop and metrics output."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import attacks
from .attacks import AgrtParams, AttackContext
from .data import Dataset, PartitionConfig, generate_synthetic, load_idx, partition, train_test_split
from .defenses import DEFENSE_IDS, BaselineAggregator, DefenseParams, fedavg
from .mabrfl import MabRflParams, init_records, mabrfl_round
from .training import Architecture, LocalTrainConfig, ModelParams, accuracy, init_params, local_update

CSV_HEADER = ["round", "accuracy", "eta", "selected", "flagged_sybil", "flagged_nonsybil", "ms"]


class ConfigError(ValueError):
    """Invalid or unparseable experiment configuration."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    num_classes: int = 10
    dim: int = 200
    samples_per_class: int = 300
    class_separation: float = 3.0
    images_path: str = ""
    labels_path: str = ""
    test_fraction: float = 0.2
    non_iid_degree: float = 0.5
    min_size: int = 10
    max_size: int = 120
    hidden: str = "auto"

    def hidden_layers(self) -> tuple[int, ...]:
        if self.hidden == "auto":
            return () if self.source == "synthetic" else (32,)
        return tuple(int(h) for h in self.hidden.split(",") if h.strip())


@dataclass(frozen=True)
class AttackConfig:
    lie_divisor: int | None = None
    lie_cap: float = 3.0
    agrt_gamma_max: float = 50.0
    agrt_search_iters: int = 40
    agrt_known_defense: str = "auto"


@dataclass(frozen=True)
class SimConfig:
    num_clients: int = 50
    attacker_fraction: float = 0.0
    attack: str = "none"
    defense: str = "fedavg"
    rounds: int = 100
    seed: int = 0
    output: str = "results"
    baseline_selection: str = "all"
    clients_per_round: int = 10
    record_timing: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    training: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    defense_params: DefenseParams = field(default_factory=DefenseParams)
    mabrfl: MabRflParams = field(default_factory=MabRflParams)
    attack_params: AttackConfig = field(default_factory=AttackConfig)

    def __post_init__(self) -> None:
        if self.attack not in attacks.ATTACK_IDS:
            raise ConfigError(f"unknown attack {self.attack!r}; expected one of {attacks.ATTACK_IDS}")
        if self.defense not in DEFENSE_IDS:
            raise ConfigError(f"unknown defense {self.defense!r}; expected one of {DEFENSE_IDS}")
        if not 0.0 <= self.attacker_fraction < 0.5:
            raise ConfigError("attacker_fraction must lie in [0, 0.5)")
        if self.rounds < 1 or self.num_clients < 1:
            raise ConfigError("rounds and num_clients must be >= 1")
        if self.baseline_selection not in ("all", "random"):
            raise ConfigError("baseline_selection must be 'all' or 'random'")

    @property
    def num_controlled(self) -> int:
        return math.ceil(round(self.attacker_fraction * self.num_clients, 9))

    def replace(self, **changes: Any) -> "SimConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RoundOutcome:
    round: int
    accuracy: float
    eta: float
    selected: list[int]
    flagged_sybil: list[int] = field(default_factory=list)
    flagged_nonsybil: list[int] = field(default_factory=list)
    ms: float = 0.0

    @property
    def survivor_count(self) -> int:
        flagged = set(self.flagged_sybil) | set(self.flagged_nonsybil)
        return sum(1 for c in self.selected if c not in flagged)


# ---------------------------------------------------------------- config io

_SECTIONS = {
    "sim": None,
    "data": "data",
    "training": "training",
    "defense": "defense_params",
    "mabrfl": "mabrfl",
    "attack": "attack_params",
}


def _scalar_fields(obj: Any) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if not dataclasses.is_dataclass(getattr(obj, f.name))}


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default: Any, key: str, optional: bool) -> Any:
    text = text.strip()
    try:
        if optional and text.lower() == "none":
            return None
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int) or (default is None and optional):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from exc


def _optional_fields(cls: type) -> set[str]:
    return {f.name for f in dataclasses.fields(cls) if "None" in str(f.type)}


def save_config(cfg: SimConfig, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    for section, attr in _SECTIONS.items():
        obj = cfg if attr is None else getattr(cfg, attr)
        parser[section] = {k: _format(v) for k, v in _scalar_fields(obj).items()}
    with open(path, "w") as fh:
        parser.write(fh)


def load_config(path: str | Path | None = None) -> SimConfig:
    """Read an INI file (one section per module); absent keys keep defaults."""
    base = SimConfig()
    if path is None:
        return base
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc

    nested: dict[str, Any] = {}
    top: dict[str, Any] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        attr = _SECTIONS[section]
        obj = base if attr is None else getattr(base, attr)
        defaults = _scalar_fields(obj)
        optional = _optional_fields(type(obj))
        values = {}
        for key, raw in parser[section].items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {section}.{key}")
            values[key] = _parse(raw, defaults[key], f"{section}.{key}", key in optional)
        if attr is None:
            top.update(values)
        else:
            nested[attr] = values
    try:
        built = {attr: dataclasses.replace(getattr(base, attr), **vals) for attr, vals in nested.items()}
        return dataclasses.replace(base, **top, **built)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: SimConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def write_metrics(outcomes: Sequence[RoundOutcome], path: str | Path, cfg: SimConfig | None = None) -> Path:
    """Write the per-round CSV and, when ``cfg`` is given, a JSON sidecar."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for o in outcomes:
                writer.writerow([
                    o.round,
                    f"{o.accuracy:.6f}",
                    f"{o.eta:.10g}",
                    ";".join(map(str, o.selected)),
                    ";".join(map(str, o.flagged_sybil)),
                    ";".join(map(str, o.flagged_nonsybil)),
                    f"{o.ms:.3f}",
                ])
        if cfg is not None:
            sidecar = path.with_suffix(".json")
            sidecar.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc
    return path


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------- simulation


@dataclass
class Environment:
    """Everything fixed for a run: data shards, test set, model shape, adversary."""

    cfg: SimConfig
    shards: list[Dataset]
    poisoned_shards: dict[int, Dataset]
    test: Dataset
    arch: Architecture
    init: ModelParams
    sizes: np.ndarray
    controlled: tuple[int, ...]

    @property
    def benign(self) -> list[int]:
        ctrl = set(self.controlled)
        return [c for c in range(self.cfg.num_clients) if c not in ctrl]

    def client_rng(self, t: int, cid: int) -> np.random.Generator:
        # keyed by (seed, round, client) so the draw never depends on who else trained
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seed, 1, t, cid]))

    def honest_update(self, params: ModelParams, t: int, cid: int) -> np.ndarray:
        shard = self.poisoned_shards.get(cid, self.shards[cid])
        return local_update(params, shard, self.cfg.training, self.client_rng(t, cid))

    def weights(self, ids: Sequence[int]) -> dict[int, float]:
        total = float(sum(self.sizes[c] for c in ids))
        return {c: float(self.sizes[c]) / total for c in ids}


def build_environment(cfg: SimConfig) -> Environment:
    root = np.random.SeedSequence(cfg.seed)
    data_ss, part_ss, model_ss = root.spawn(3)
    data_rng = np.random.default_rng(data_ss)
    dc = cfg.data
    if dc.source == "synthetic":
        full = generate_synthetic(dc.num_classes, dc.dim, dc.samples_per_class, dc.class_separation, data_rng)
    elif dc.source == "idx":
        full = load_idx(dc.images_path, dc.labels_path, dc.num_classes)
    else:
        raise ConfigError(f"unknown data source {dc.source!r}")
    train, test = train_test_split(full, dc.test_fraction, data_rng)
    pcfg = PartitionConfig(cfg.num_clients, dc.non_iid_degree, (dc.min_size, dc.max_size), cfg.seed)
    parts = partition(train, pcfg, np.random.default_rng(part_ss))

    controlled = tuple(range(cfg.num_controlled))
    poisoned = {}
    if cfg.attack == "lf":
        poisoned = {c: attacks.label_flip(parts.shards[c]) for c in controlled}
    arch = Architecture(full.dim, full.num_classes, dc.hidden_layers())
    init = init_params(arch, np.random.default_rng(model_ss))
    return Environment(cfg, parts.shards, poisoned, test, arch, init, np.array(parts.sizes), controlled)


def apply_attack(
    env: Environment,
    updates: dict[int, np.ndarray],
    t: int,
) -> dict[int, np.ndarray]:
    """Replace the controlled participants' updates according to the attack.

    Label flipping already acted on the data; LIE and AGRT see exactly the
    honest updates of this round's benign participants.
    """
    cfg = env.cfg
    ctrl = tuple(c for c in sorted(updates) if c in set(env.controlled))
    if cfg.attack in ("none", "lf") or not ctrl:
        return updates
    known = {c: g for c, g in updates.items() if c not in set(ctrl)}
    if len(known) < 2:
        return updates
    ctx = AttackContext(ctrl, known, len(updates))
    ap = cfg.attack_params
    if cfg.attack == "lie":
        divisor = ap.lie_divisor if ap.lie_divisor is not None else len(known)
        zmax = attacks.lie_zmax(len(updates), divisor, ap.lie_cap).zmax
        poisoned = attacks.lie_attack(ctx, zmax)
    else:
        known_defense = ap.agrt_known_defense
        if known_defense == "auto":
            known_defense = cfg.defense if cfg.defense in attacks.EVALUABLE_DEFENSES else "krum"
        params = AgrtParams(
            ap.agrt_gamma_max,
            ap.agrt_search_iters,
            known_defense,
            cfg.defense_params.krum_f,
            cfg.defense_params,
        )
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, t]))
        poisoned = attacks.agrt_attack(ctx, params, rng)
    out = dict(updates)
    out.update(poisoned)
    return out


def run_experiment(cfg: SimConfig, env: Environment | None = None) -> list[RoundOutcome]:
    """Train for ``cfg.rounds`` rounds under the configured attack and defense."""
    env = env or build_environment(cfg)
    params = env.init
    all_ids = list(range(cfg.num_clients))
    sel_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    outcomes: list[RoundOutcome] = []

    if cfg.defense == "mabrfl":
        records = init_records(all_ids)
    else:
        aggregator = BaselineAggregator(
            cfg.defense,
            cfg.defense_params,
            np.random.default_rng(np.random.SeedSequence([cfg.seed, 4])),
            krum_f=len(env.controlled),
        )

    for t in range(1, cfg.rounds + 1):
        start = time.perf_counter()
        current = params

        def provider(ids: Sequence[int]) -> dict[int, np.ndarray]:
            honest = {c: env.honest_update(current, t, c) for c in ids}
            return apply_attack(env, honest, t)

        if cfg.defense == "mabrfl":
            rnd, _ = mabrfl_round(records, t, provider, cfg.mabrfl, sel_rng)
            if rnd.delta.size:
                params = params.with_flat(params.flat + rnd.delta)
            selected, sybil, nonsybil, eta = rnd.selected, rnd.flagged_sybil, rnd.flagged_nonsybil, rnd.eta
        else:
            if cfg.baseline_selection == "random":
                k = min(cfg.clients_per_round, cfg.num_clients)
                selected = sorted(int(c) for c in sel_rng.choice(cfg.num_clients, size=k, replace=False))
            else:
                selected = all_ids
            updates = provider(selected)
            agg = aggregator(updates, env.weights(selected))
            params = params.with_flat(params.flat + agg)
            sybil, nonsybil, eta = [], [], float(np.linalg.norm(agg))

        acc = accuracy(params, env.test)
        ms = (time.perf_counter() - start) * 1000.0 if cfg.record_timing else 0.0
        outcomes.append(RoundOutcome(t, acc, eta, list(selected), list(sybil), list(nonsybil), ms))
    return outcomes


def controlled_selection_fraction(outcomes: Sequence[RoundOutcome], controlled: Sequence[int], last: int) -> float:
    """Mean per-round share of selected clients that the adversary controls."""
    ctrl = set(controlled)
    tail = outcomes[-last:]
    shares = [sum(c in ctrl for c in o.selected) / len(o.selected) for o in tail if o.selected]
    return float(np.mean(shares)) if shares else 0.0


# ---------------------------------------------------------- sampling demo

SAMPLING_POLICIES = ("random_a", "random_b", "rational")


def fig1a_preset() -> SimConfig:
    """Sampling demo defaults: label flipping by 40% of 50 clients, 50 rounds."""
    return SimConfig(attack="lf", attacker_fraction=0.4, rounds=50)


def rational_vs_random_demo(cfg: SimConfig) -> dict[str, list[float]]:
    """Per-round accuracy of three ways to pick ``clients_per_round`` clients.

    random_a aggregates a random subset as-is, random_b drops the
    adversary's updates from that subset by oracle knowledge, and rational
    only ever samples honest clients. All three walk the same random client
    order, so rational's pick contains random_b's honest clients.
    """
    env = build_environment(cfg)
    ctrl = set(env.controlled)
    k = min(cfg.clients_per_round, cfg.num_clients)
    curves: dict[str, list[float]] = {}
    for policy in SAMPLING_POLICIES:
        params = env.init
        order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
        accs = []
        for t in range(1, cfg.rounds + 1):
            order = [int(c) for c in order_rng.permutation(cfg.num_clients)]
            if policy == "rational":
                chosen = [c for c in order if c not in ctrl][:k]
            else:
                chosen = order[:k]
            updates = apply_attack(env, {c: env.honest_update(params, t, c) for c in sorted(chosen)}, t)
            if policy == "random_b":
                updates = {c: g for c, g in updates.items() if c not in ctrl}
            if updates:
                agg = fedavg(updates, env.weights(sorted(updates)))
                params = params.with_flat(params.flat + agg)
            accs.append(accuracy(params, env.test))
        curves[policy] = accs
    return curves


def write_demo(curves: dict[str, list[float]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", *curves])
        for i, row in enumerate(zip(*curves.values()), start=1):
            writer.writerow([i, *(f"{a:.6f}" for a in row)])
    return path


# -------------------------------------------------------------------- sweep


def sweep(
    cfg: SimConfig,
    attacker_fractions: Sequence[float],
    attack_ids: Sequence[str],
    defense_ids: Sequence[str],
    out_dir: str | Path,
) -> Path:
    """Run every (fraction, attack, defense) combination plus a clean row.

    Writes one metrics CSV per run and ``summary.csv`` holding the final
    accuracy with one column per defense.
    """
    out_dir = Path(out_dir)
    for name in attack_ids:
        if name not in attacks.ATTACK_IDS:
            raise ConfigError(f"unknown attack {name!r}")
    for name in defense_ids:
        if name not in DEFENSE_IDS:
            raise ConfigError(f"unknown defense {name!r}")

    rows: list[tuple[float, str]] = [(0.0, "none")]
    rows += [(f, a) for f in attacker_fractions if f > 0 for a in attack_ids if a != "none"]
    summary = []
    for frac, attack in rows:
        line = {"attackers": f"{frac:.2f}", "attack": attack}
        for defense in defense_ids:
            run_cfg = cfg.replace(attacker_fraction=frac, attack=attack, defense=defense)
            outcomes = run_experiment(run_cfg)
            write_metrics(outcomes, out_dir / f"{attack}_{frac:.2f}_{defense}.csv", run_cfg)
            line[defense] = f"{outcomes[-1].accuracy:.4f}"
        summary.append(line)

    path = out_dir / "summary.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, ["attackers", "attack", *defense_ids], lineterminator="\n")
        writer.writeheader()
        writer.writerows(summary)
    return path
