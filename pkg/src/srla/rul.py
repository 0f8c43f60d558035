"""Monte-Carlo remaining-useful-life estimates from a fitted IOHMM.

Each rollout starts in the last Viterbi state of the observed prefix and
walks the state chain until it enters a failure state. The RUL of a rollout
is the number of transitions taken; the estimate is their mean.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .errors import ConfigError
from .iohmm import IohmmParams, OnlineDecoder, viterbi


@dataclass
class RulConfig:
    n_rollouts: int = 100
    horizon_cap: int = 500
    input_policy: Literal["hold_last", "empirical"] = "hold_last"
    seed: int = 0

    def validate(self) -> "RulConfig":
        if self.n_rollouts < 1 or self.horizon_cap < 1:
            raise ConfigError("n_rollouts and horizon_cap must be positive")
        if self.input_policy not in ("hold_last", "empirical"):
            raise ConfigError(f"unknown input policy {self.input_policy!r}")
        return self


@dataclass(frozen=True)
class RulEstimate:
    cycle: int
    mean_rul: float
    std_rul: float
    n_rollouts: int
    truncated_fraction: float

    @property
    def std_error(self) -> float:
        return self.std_rul / np.sqrt(self.n_rollouts)


def _failure_mask(params: IohmmParams, failure_states: Iterable[int]) -> np.ndarray:
    mask = np.zeros(params.n_states, dtype=bool)
    idx = [int(s) for s in failure_states]
    if not idx:
        raise ConfigError("failure_states is empty; decode failure states first")
    if min(idx) < 0 or max(idx) >= params.n_states:
        raise ConfigError(f"failure state out of range for a {params.n_states}-state model")
    mask[idx] = True
    return mask


def rollout_lengths(
    params: IohmmParams,
    start_state: int,
    failure_mask: np.ndarray,
    inputs_seen: Sequence[int],
    config: RulConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Transitions to failure for ``config.n_rollouts`` rollouts, capped at ``horizon_cap``.

    Returns the lengths and a mask of rollouts that were cut off by the cap.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n_rollouts
    lengths = np.full(n, config.horizon_cap, dtype=np.int64)
    if failure_mask[start_state]:
        return np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool)
    cum = np.cumsum(params.A, axis=-1)
    inputs_seen = np.asarray(inputs_seen, dtype=np.int64)
    state = np.full(n, start_state, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for step in range(1, config.horizon_cap + 1):
        idx = np.flatnonzero(alive)
        if config.input_policy == "hold_last":
            u = np.full(len(idx), inputs_seen[-1])
        else:
            u = inputs_seen[rng.integers(len(inputs_seen), size=len(idx))]
        rows = cum[u, state[idx]]
        draw = rng.random(len(idx))[:, None] * rows[:, -1:]
        nxt = np.minimum((rows <= draw).sum(axis=1), params.n_states - 1)
        state[idx] = nxt
        hit = failure_mask[nxt]
        lengths[idx[hit]] = step
        alive[idx[hit]] = False
        if not alive.any():
            break
    return lengths, alive


def _summarize(cycle: int, rollouts: tuple[np.ndarray, np.ndarray]) -> RulEstimate:
    lengths, truncated = rollouts
    x = lengths.astype(float)
    std = float(x.std(ddof=1)) if len(x) > 1 else 0.0
    return RulEstimate(cycle, float(np.mean(x)), std, len(x), float(np.mean(truncated)))


def estimate_rul(
    params: IohmmParams,
    prefix_u: Sequence[int],
    prefix_y: np.ndarray,
    failure_states: Iterable[int],
    config: RulConfig | None = None,
) -> RulEstimate:
    config = (config or RulConfig()).validate()
    mask = _failure_mask(params, failure_states)
    prefix_u = np.asarray(prefix_u, dtype=np.int64)
    if len(prefix_u) == 0:
        raise ConfigError("prefix must contain at least one cycle")
    start = int(viterbi(params, prefix_u, prefix_y).states[-1])
    if mask[start]:
        return RulEstimate(len(prefix_u), 0.0, 0.0, config.n_rollouts, 0.0)
    return _summarize(len(prefix_u), rollout_lengths(params, start, mask, prefix_u, config))


def rul_trend(
    params: IohmmParams,
    inputs: Sequence[int],
    sensors: np.ndarray,
    failure_states: Iterable[int],
    stride: int = 1,
    config: RulConfig | None = None,
) -> list[RulEstimate]:
    """Estimates at cycles 1, 1 + stride, ... of one unit, decoding the prefix incrementally."""
    if stride < 1:
        raise ConfigError("stride must be at least 1")
    config = (config or RulConfig()).validate()
    mask = _failure_mask(params, failure_states)
    inputs = np.asarray(inputs, dtype=np.int64)
    decoder = OnlineDecoder(params)
    out = []
    for t in range(len(inputs)):
        state, _ = decoder.step(int(inputs[t]), sensors[t])
        if t % stride:
            continue
        if mask[state]:
            out.append(RulEstimate(t + 1, 0.0, 0.0, config.n_rollouts, 0.0))
        else:
            out.append(_summarize(t + 1, rollout_lengths(params, state, mask, inputs[: t + 1], config)))
    return out


def write_trend_csv(path: str | Path, rows: Iterable[tuple[int, RulEstimate]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "cycle", "mean_rul", "std_rul", "truncated_fraction"])
        for unit, est in rows:
            w.writerow([unit, est.cycle, repr(est.mean_rul), repr(est.std_rul), repr(est.truncated_fraction)])
    return path


def rul_config_dict(config: RulConfig) -> dict:
    return asdict(config)
