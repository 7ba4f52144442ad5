"""Thompson sampling for the Bernoulli bandit, with regret bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import RngStream


@dataclass
class BanditState:
    successes: list[int]
    failures: list[int]

    @classmethod
    def fresh(cls, n_arms: int) -> "BanditState":
        if n_arms < 1:
            raise ValueError("need at least one arm")
        return cls([1] * n_arms, [1] * n_arms)

    @property
    def n_arms(self) -> int:
        return len(self.successes)

    def pulls(self, arm: int) -> int:
        return self.successes[arm] + self.failures[arm] - 2


@dataclass
class RegretLedger:
    """Per-step history of a bandit run.

    ``regret_indicator[t]`` counts steps that missed the best arm up to and
    including step t; ``regret_gap[t]`` accumulates the mean-reward gap.
    """

    means: list[float]
    chosen: list[int] = field(default_factory=list)
    rewards: list[int] = field(default_factory=list)
    regret_indicator: list[int] = field(default_factory=list)
    regret_gap: list[float] = field(default_factory=list)

    @property
    def best_arm(self) -> int:
        return int(np.argmax(self.means))

    def record(self, arm: int, reward: int) -> None:
        best = self.best_arm
        prev_ind = self.regret_indicator[-1] if self.regret_indicator else 0
        prev_gap = self.regret_gap[-1] if self.regret_gap else 0.0
        self.chosen.append(arm)
        self.rewards.append(reward)
        self.regret_indicator.append(prev_ind + int(arm != best))
        self.regret_gap.append(prev_gap + self.means[best] - self.means[arm])


def ts_step(state: BanditState, rng: RngStream) -> int:
    """Sample every arm's posterior and play the argmax (lowest index on ties)."""
    draws = rng.beta(np.asarray(state.successes, float), np.asarray(state.failures, float))
    return int(np.argmax(draws))


def ts_update(state: BanditState, arm: int, reward: int) -> BanditState:
    if reward not in (0, 1):
        raise ValueError(f"reward must be 0 or 1, got {reward}")
    if reward:
        state.successes[arm] += 1
    else:
        state.failures[arm] += 1
    return state


def run_bernoulli(means: Sequence[float], horizon: int, rng: RngStream) -> RegretLedger:
    """Simulate Thompson sampling on Bernoulli arms for ``horizon`` steps."""
    state = BanditState.fresh(len(means))
    ledger = RegretLedger(list(means))
    for _ in range(horizon):
        arm = ts_step(state, rng)
        reward = int(rng.random() < means[arm])
        ts_update(state, arm, reward)
        ledger.record(arm, reward)
    return ledger


def run_uniform(means: Sequence[float], horizon: int, rng: RngStream) -> RegretLedger:
    """Baseline policy that plays a uniformly random arm each step."""
    ledger = RegretLedger(list(means))
    for _ in range(horizon):
        arm = int(rng.integers(len(means)))
        ledger.record(arm, int(rng.random() < means[arm]))
    return ledger
