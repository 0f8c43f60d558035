"""Replay environment for the hold/replace maintenance decision.

An episode replays one recorded unit from cycle 1. Rewards for a unit with
failure cycle ``T``::

    hold    and t < T  ->  0                  (t advances)
    replace and t < T  ->  -c_r / T           (episode ends)
    any action, t = T  ->  -(c_r + c_f) / T   (episode ends as a failure)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import RunToFailureDataset
from .errors import ConfigError, DatasetError, EpisodeError

HOLD = 0
REPLACE = 1
REPAIR = 2
ACTION_NAMES = ("hold", "replace", "repair")

Observer = Callable[[int, int], np.ndarray]


@dataclass
class EnvConfig:
    c_r: float = 100.0
    c_f: float = 1000.0
    repair_enabled: bool = False
    repair_depth: int = 10
    repair_cost: float = 50.0

    def validate(self) -> "EnvConfig":
        if not self.c_r > 0:
            raise ConfigError("c_r must be positive")
        if self.c_f < 0:
            raise ConfigError("c_f must be non-negative")
        if self.repair_enabled and self.repair_depth < 1:
            raise ConfigError("repair_depth must be at least 1")
        return self

    @property
    def n_actions(self) -> int:
        return 3 if self.repair_enabled else 2


@dataclass
class EnvState:
    unit_index: int
    unit_id: int
    t: int
    failure_cycle: int
    observation: np.ndarray
    done: bool = False


@dataclass(frozen=True)
class TraceStep:
    unit_id: int
    t: int
    failure_cycle: int
    action: int
    reward: float
    done: bool


def raw_observer(data: RunToFailureDataset) -> Observer:
    """Sensor row followed by operating settings, exactly as recorded."""
    rows = [np.hstack([u.sensors, u.op_settings]) for u in data.units]
    return lambda i, t: rows[i][t - 1]


class MaintenanceEnv:
    """Single-threaded replay environment over a pool of units.

    ``observe(unit_index, t)`` supplies the observation; by default the raw
    recorded row. Keeping it injectable lets every feature pipeline share the
    same dynamics.
    """

    def __init__(self, pool: RunToFailureDataset, config: EnvConfig | None = None,
                 observe: Observer | None = None, rng: np.random.Generator | None = None):
        if len(pool) == 0:
            raise DatasetError("environment pool is empty")
        self.pool = pool
        self.config = (config or EnvConfig()).validate()
        self.observe = observe or raw_observer(pool)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._raw = raw_observer(pool)
        self.state: EnvState | None = None
        self.trace: list[TraceStep] = []

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    def raw_observation(self) -> np.ndarray:
        s = self._require_state()
        return self._raw(s.unit_index, s.t)

    def _require_state(self) -> EnvState:
        if self.state is None:
            raise EpisodeError("call reset() before stepping")
        return self.state

    def _make_state(self, i: int, t: int) -> EnvState:
        unit = self.pool.units[i]
        return EnvState(i, unit.unit_id, t, unit.length, self.observe(i, t))

    def reset(self, rng: np.random.Generator | None = None, unit_index: int | None = None) -> EnvState:
        """Start an episode on ``unit_index`` or on a uniformly drawn unit."""
        if unit_index is None:
            unit_index = int((rng or self.rng).integers(len(self.pool)))
        elif not 0 <= unit_index < len(self.pool):
            raise ConfigError(f"unit index {unit_index} outside the pool of {len(self.pool)}")
        self.state = self._make_state(unit_index, 1)
        self.trace = []
        return self.state

    def step(self, action: int) -> tuple[EnvState, float, bool]:
        s = self._require_state()
        if s.done:
            raise EpisodeError(f"episode on unit {s.unit_id} already finished at t={s.t}")
        if action not in range(self.n_actions):
            raise ConfigError(f"invalid action {action}")
        c, T, t = self.config, s.failure_cycle, s.t
        if t >= T:
            reward, done, nxt_t = -(c.c_r + c.c_f) / T, True, t
        elif action == REPLACE:
            reward, done, nxt_t = -c.c_r / T, True, t
        elif action == REPAIR:
            reward, done, nxt_t = -c.repair_cost / T, False, max(1, t - c.repair_depth)
        else:
            reward, done, nxt_t = 0.0, False, t + 1
        self.trace.append(TraceStep(s.unit_id, t, T, int(action), reward, done))
        if done:
            s.done = True
            nxt = s
        else:
            nxt = self._make_state(s.unit_index, nxt_t)
        self.state = nxt
        return nxt, reward, done


@dataclass
class EpisodeStats:
    unit_id: int
    failure_cycle: int
    failed: bool
    end_cycle: int
    replace_cycle: int | None
    remaining_cycles: int | None
    total_cost: float
    discounted_cost: float = field(default=float("nan"))


def episode_stats(trace: Sequence[TraceStep], gamma: float = 0.95) -> EpisodeStats:
    """Summary of one finished episode; ``total_cost`` is minus the sum of rewards."""
    if not trace or not trace[-1].done:
        raise EpisodeError("episode trace is empty or has not terminated")
    last = trace[-1]
    failed = last.t >= last.failure_cycle
    rewards = np.array([s.reward for s in trace])
    disc = float(-(rewards * gamma ** np.arange(len(rewards))).sum())
    return EpisodeStats(
        unit_id=last.unit_id,
        failure_cycle=last.failure_cycle,
        failed=failed,
        end_cycle=last.t,
        replace_cycle=None if failed else last.t,
        remaining_cycles=None if failed else last.failure_cycle - last.t,
        total_cost=float(-rewards.sum()),
        discounted_cost=disc,
    )


def write_trace_csv(path: str | Path, traces: Sequence[Sequence[TraceStep]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "t", "action", "reward", "done"])
        for trace in traces:
            for s in trace:
                w.writerow([s.unit_id, s.t, ACTION_NAMES[s.action], repr(s.reward), int(s.done)])
    return path
