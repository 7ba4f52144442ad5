"""Command-line entry point: single runs, sweeps, the bandit demo and fig1a."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import sim
from .bandit import run_bernoulli

log = logging.getLogger("mabrfl_sim")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _names(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _config(args: argparse.Namespace, base: sim.SimConfig | None = None) -> sim.SimConfig:
    cfg = sim.load_config(args.config) if args.config else (base or sim.SimConfig())
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out_dir = Path(args.out or cfg.output)
    outcomes = sim.run_experiment(cfg)
    name = f"{cfg.attack}_{cfg.attacker_fraction:.2f}_{cfg.defense}_seed{cfg.seed}.csv"
    path = sim.write_metrics(outcomes, out_dir / name, cfg)
    print(f"final accuracy {outcomes[-1].accuracy:.4f} -> {path}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out_dir = Path(args.out or cfg.output)
    path = sim.sweep(cfg, args.attacker_fractions, args.attacks, args.defenses, out_dir)
    print(path.read_text(), end="")
    print(f"summary -> {path}")
    return 0


def cmd_bandit(args: argparse.Namespace) -> int:
    if args.horizon < 1 or args.seeds < 1:
        raise ValueError("horizon and seeds must be positive")
    if not args.arms or any(not 0.0 <= m <= 1.0 for m in args.arms):
        raise ValueError("arm means must lie in [0, 1]")
    ledgers = [run_bernoulli(args.arms, args.horizon, np.random.default_rng(s)) for s in range(args.seeds)]
    indicator = np.mean([lg.regret_indicator for lg in ledgers], axis=0)
    gap = np.mean([lg.regret_gap for lg in ledgers], axis=0)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "regret_indicator", "regret_gap"])
        for t in range(args.horizon):
            writer.writerow([t + 1, f"{indicator[t]:.6f}", f"{gap[t]:.6f}"])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_fig1a(args: argparse.Namespace) -> int:
    cfg = _config(args, base=sim.fig1a_preset())
    curves = sim.rational_vs_random_demo(cfg)
    path = sim.write_demo(curves, Path(args.out or cfg.output) / f"fig1a_seed{cfg.seed}.csv")
    finals = "  ".join(f"{k}={v[-1]:.4f}" for k, v in curves.items())
    print(f"{finals} -> {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mabrfl-sim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one experiment, per-round metrics CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="attack x defense x fraction grid with a summary table")
    p.add_argument("--config", required=True)
    p.add_argument("--attacker-fractions", type=_floats, default=[0.1, 0.2, 0.3, 0.4])
    p.add_argument("--attacks", type=_names, default=["lf", "lie", "agrt"])
    p.add_argument("--defenses", type=_names, default=["fedavg", "krum", "faba", "median", "dnc", "cc", "mabrfl"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bandit-demo", help="Thompson sampling regret on Bernoulli arms")
    p.add_argument("--arms", type=_floats, default=[0.9] + [0.5] * 9)
    p.add_argument("--horizon", type=int, default=10_000)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_bandit)

    p = sub.add_parser("fig1a", help="random vs rational client sampling")
    p.add_argument("--config", help="defaults to label flipping with 40%% attackers")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fig1a)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except sim.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
