"""Cost metrics and the per-unit evaluation pass over a test split.

``q_star_avg`` is the pooled cost rate ``sum_j C_j / sum_j L_j`` where
``C_j`` is ``c_r`` for a replaced unit and ``c_r + c_f`` for a failed one and
``L_j`` is the cycle at which the episode ended. The ideal policy (replace at
``T_j - 1``) gives exactly :func:`imc` and always-hold gives exactly
:func:`cmc`, so every policy is bracketed by the two.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import RunToFailureDataset
from .env import EnvConfig, EnvState, EpisodeStats, MaintenanceEnv, REPLACE, TraceStep, episode_stats
from .errors import ConfigError, DatasetError, EpisodeError
from .features import FeaturePipeline
from .network import NetworkParams, forward


def _lengths(test: RunToFailureDataset | Sequence[int]) -> list[int]:
    lengths = [int(T) for T in (test.lengths if isinstance(test, RunToFailureDataset) else test)]
    if not lengths:
        raise DatasetError("test set is empty")
    return lengths


def imc(test: RunToFailureDataset | Sequence[int], c_r: float) -> float:
    """Ideal maintenance cost: every unit replaced one cycle before failure."""
    lengths = _lengths(test)
    if min(lengths) <= 1:
        raise DatasetError("every unit needs at least 2 cycles for the ideal cost")
    return float(Fraction(len(lengths)) * Fraction(c_r) / sum(T - 1 for T in lengths))


def cmc(test: RunToFailureDataset | Sequence[int], c_r: float, c_f: float) -> float:
    """Corrective maintenance cost: every unit run to failure."""
    lengths = _lengths(test)
    return float(Fraction(len(lengths)) * (Fraction(c_r) + Fraction(c_f)) / sum(lengths))


@dataclass
class MetricsReport:
    q_star_avg: float
    imc: float
    cmc: float
    imc_over_q: float
    failure_pct: float
    avg_remaining_cycles: float
    n_units: int
    empirical_return_avg: float
    mean_episode_cost: float
    literal_estimate: float = float("nan")
    system: str = ""
    error: str = ""

    def as_row(self) -> dict:
        return asdict(self)


TABLE_COLUMNS = ("system", "q_star_avg", "imc", "cmc", "imc_over_q", "failure_pct", "avg_remaining_cycles",
                 "n_units", "empirical_return_avg", "mean_episode_cost", "literal_estimate", "error")


def failed_report(system: str, error: str) -> MetricsReport:
    nan = float("nan")
    return MetricsReport(nan, nan, nan, nan, nan, nan, 0, nan, nan, nan, system, error)


def summarize(stats: Sequence[EpisodeStats], lengths: Sequence[int], config: EnvConfig,
              literal: float = float("nan"), system: str = "") -> MetricsReport:
    if not stats:
        raise DatasetError("no episodes to summarize")
    costs = [config.c_r + (config.c_f if s.failed else 0.0) for s in stats]
    spans = [s.end_cycle for s in stats]
    q = float(Fraction(sum(Fraction(c) for c in costs)) / sum(spans))
    lo, hi = imc(lengths, config.c_r), cmc(lengths, config.c_r, config.c_f)
    remaining = [s.remaining_cycles for s in stats if not s.failed]
    return MetricsReport(
        q_star_avg=q,
        imc=lo,
        cmc=hi,
        imc_over_q=lo / q if q > 0 else float("nan"),
        failure_pct=100.0 * sum(s.failed for s in stats) / len(stats),
        avg_remaining_cycles=float(np.mean(remaining)) if remaining else 0.0,
        n_units=len(stats),
        empirical_return_avg=float(np.mean([s.discounted_cost for s in stats])),
        mean_episode_cost=float(np.mean([s.total_cost for s in stats])),
        literal_estimate=literal,
        system=system,
    )


@dataclass
class Evaluation:
    report: MetricsReport
    episodes: list[EpisodeStats] = field(default_factory=list)
    traces: list[list[TraceStep]] = field(default_factory=list)


def literal_q_estimate(traces: Sequence[Sequence[TraceStep]], q: NetworkParams, pipeline: FeaturePipeline,
                       test: RunToFailureDataset, gamma: float) -> float:
    """Transition mean of ``-(r + gamma * max_a Q(s', a))``; terminal steps bootstrap nothing."""
    vals = []
    by_id = {u.unit_id: u for u in test.units}
    for trace in traces:
        x = pipeline.transform_unit(by_id[trace[0].unit_id])
        v_next = forward(q, x).max(1)
        for s in trace:
            boot = 0.0 if s.done else gamma * v_next[s.t]  # row t is cycle t+1
            vals.append(-(s.reward + boot))
    return float(np.mean(vals)) if vals else float("nan")


def evaluate_policy(test: RunToFailureDataset, policy, env_config: EnvConfig | None = None, gamma: float = 0.95,
                    q: NetworkParams | None = None, pipeline: FeaturePipeline | None = None,
                    system: str = "") -> Evaluation:
    """Run ``policy`` once on every test unit from cycle 1.

    ``policy`` offers ``begin_episode(unit)`` and ``act(state) -> action``.
    When ``q`` and ``pipeline`` are given the literal value-based estimate is
    reported as well.
    """
    env_config = (env_config or EnvConfig()).validate()
    env = MaintenanceEnv(test, env_config, observe=lambda i, t: None)
    stats, traces = [], []
    for i, unit in enumerate(test.units):
        s = env.reset(unit_index=i)
        try:
            policy.begin_episode(unit)
            done = False
            while not done:
                s, _, done = env.step(policy.act(s))
        except Exception as exc:
            raise EpisodeError(f"policy failed on unit {unit.unit_id}: {type(exc).__name__}: {exc}") from exc
        traces.append(list(env.trace))
        stats.append(episode_stats(env.trace, gamma))
    literal = float("nan")
    if q is not None and pipeline is not None:
        literal = literal_q_estimate(traces, q, pipeline, test, gamma)
    return Evaluation(summarize(stats, test.lengths, env_config, literal, system), stats, traces)


class IdealPolicy:
    """Replace one cycle before failure; needs the true failure cycle."""

    def begin_episode(self, unit) -> None:
        pass

    def act(self, state: EnvState) -> int:
        return int(state.t >= state.failure_cycle - 1)


class ConstantPolicy:
    def __init__(self, action: int):
        self.action = action

    def begin_episode(self, unit) -> None:
        pass

    def act(self, state: EnvState) -> int:
        return self.action


class ReplaceAtPolicy:
    """Replace at a fixed cycle (or at ``T - margin`` with ``relative``)."""

    def __init__(self, cycle: int, relative: bool = False):
        self.cycle, self.relative = cycle, relative

    def begin_episode(self, unit) -> None:
        pass

    def act(self, state: EnvState) -> int:
        at = state.failure_cycle - self.cycle if self.relative else self.cycle
        return REPLACE if state.t >= at else 0


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_reports_csv(path: str | Path, reports: Sequence[MetricsReport], extra: Sequence[dict] | None = None) -> Path:
    """One row per report; ``extra`` adds leading columns (e.g. sweep parameters) row by row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = list(extra) if extra is not None else [{} for _ in reports]
    keys = list(extra[0].keys()) if extra else []
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + list(TABLE_COLUMNS))
        for ex, r in zip(extra, reports):
            row = r.as_row()
            w.writerow([_fmt(ex[k]) for k in keys] + [_fmt(row[c]) for c in TABLE_COLUMNS])
    return path


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Fixed-width text table in the column order of the CSV."""
    head = ["system", "Q*", "IMC", "CMC", "IMC/Q*", "failure%", "remaining"]
    lines = ["{:<14}{:>9}{:>9}{:>9}{:>9}{:>10}{:>11}".format(*head)]
    for r in reports:
        if r.error:
            lines.append(f"{r.system:<14}error: {r.error}")
            continue
        lines.append(f"{r.system:<14}{r.q_star_avg:>9.3f}{r.imc:>9.3f}{r.cmc:>9.3f}{r.imc_over_q:>9.3f}"
                     f"{r.failure_pct:>9.1f}%{r.avg_remaining_cycles:>11.2f}")
    return "\n".join(lines)
