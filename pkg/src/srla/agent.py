"""Q-learning agent, experts, behavior-cloning pretraining and the gated SRLA policy."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Protocol, Sequence

import numpy as np

from .data import NormalizationSpec, RunToFailureDataset, UnitTrajectory
from .decoding import StateAnnotation, posterior_failure_mass, unit_inputs
from .env import HOLD, REPLACE, EnvConfig, EnvState, MaintenanceEnv
from .errors import ConfigError, DimensionError, DivergenceError, NumericalError, PrerequisiteMissing
from .features import DecodedUnit, FeaturePipeline, decode_online
from .iohmm import IohmmParams, OnlineDecoder
from .network import (
    BcConfig,
    NetworkParams,
    TrainStepConfig,
    agreement,
    clone_behavior,
    forward,
    init_network,
    train_step,
)
from .rul import RulConfig, rollout_lengths

log = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    gamma: float = 0.95
    lr: float = 1e-4
    epsilon0: float = 0.5
    epsilon_decay: float = 0.99
    epsilon_floor: float = 0.01
    max_episodes: int = 10_000
    loss_threshold: float = 1e-4
    loss_window: int = 20
    target_refresh: int = 100
    clip_norm: float | None = 10.0
    replay: bool = False
    replay_capacity: int = 10_000
    batch_size: int = 32

    def validate(self) -> "AgentConfig":
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        for name in ("epsilon0", "epsilon_floor", "epsilon_decay"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.max_episodes < 1 or self.target_refresh < 1 or self.loss_window < 1:
            raise ConfigError("max_episodes, target_refresh and loss_window must be positive")
        return self


def epsilon_at(config: AgentConfig, episode: int) -> float:
    """Exploration rate for a 0-based episode index; decays once per episode."""
    return max(config.epsilon_floor, config.epsilon0 * config.epsilon_decay ** episode)


def act(q: NetworkParams, features: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action; exact ties go to hold (action 0)."""
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError("epsilon must lie in [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(q.n_outputs))
    return int(np.argmax(forward(q, features)))


def state_value(q: NetworkParams, features: np.ndarray) -> np.ndarray | float:
    v = forward(q, features).max(axis=-1)
    return float(v) if np.ndim(v) == 0 else v


def td_target(reward: float, next_max_q: float, done: bool, gamma: float) -> float:
    """One-step target; a terminal transition bootstraps nothing."""
    return float(reward) if done else float(reward + gamma * next_max_q)


def q_update_tabular(Q: np.ndarray, s: int, a: int, r: float, s_next: int, done: bool, alpha: float, gamma: float) -> np.ndarray:
    """In-place Q-learning update of a table ``Q[s, a]``."""
    Q[s, a] += alpha * (td_target(r, Q[s_next].max(), done, gamma) - Q[s, a])
    return Q


# ---------------------------------------------------------------------------
# gate


@dataclass
class GateTrack:
    states: np.ndarray
    posterior: np.ndarray
    in_xs: np.ndarray
    p_fail: np.ndarray


@dataclass
class Gate:
    """Online decoding of a unit plus the X_s membership and failure mass at every cycle."""

    model: IohmmParams
    annotation: StateAnnotation
    model_norm: NormalizationSpec | None = None
    safety_net: bool = True
    default_action: int = HOLD
    _cache: dict = field(default_factory=dict, repr=False)

    def track(self, unit: UnitTrajectory) -> GateTrack:
        key = (id(unit), unit.unit_id)
        hit = self._cache.get(key)
        if hit is None:
            dec = decode_online(self.model, unit, self.model_norm)
            hit = self._track_from(dec)
            self._cache[key] = hit
        return hit

    def _track_from(self, dec: DecodedUnit) -> GateTrack:
        xs = np.array(sorted(self.annotation.specialized_states), dtype=np.int64)
        fail = sorted(self.annotation.failure_states)
        p_fail = np.clip(dec.posterior[:, fail].sum(1), 0.0, 1.0) if fail else np.zeros(len(dec.states))
        return GateTrack(dec.states, dec.posterior, np.isin(dec.states, xs), p_fail)

    def decide(self, in_xs: bool, p_fail: float, agent_action: int) -> int:
        action = agent_action if in_xs else self.default_action
        if self.safety_net and p_fail > self.annotation.p_fail_threshold:
            return REPLACE
        return action


@dataclass(frozen=True)
class GateRecord:
    unit_id: int
    t: int
    viterbi_state: int
    in_xs: bool
    p_fail: float
    agent_action: int
    action: int


def write_gate_log(path: str | Path, records: Iterable[GateRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "t", "viterbi_state", "in_Xs", "p_fail", "agent_action", "action"])
        for r in records:
            w.writerow([r.unit_id, r.t, r.viterbi_state, int(r.in_xs), repr(r.p_fail), r.agent_action, r.action])
    return path


def read_gate_log(path: str | Path) -> list[GateRecord]:
    with Path(path).open(newline="") as fh:
        return [GateRecord(int(r["unit"]), int(r["t"]), int(r["viterbi_state"]), r["in_Xs"] == "1",
                           float(r["p_fail"]), int(r["agent_action"]), int(r["action"])) for r in csv.DictReader(fh)]


def gate_violations(records: Iterable[GateRecord], threshold: float, default_action: int = HOLD,
                    safety_net: bool = True) -> list[GateRecord]:
    """Records whose action breaks the gate or safety-net rules."""
    bad = []
    for r in records:
        if safety_net and r.p_fail > threshold:
            ok = r.action == REPLACE
        elif not r.in_xs:
            ok = r.action == default_action
        else:
            ok = r.action == r.agent_action
        # the safety net may add replacements but never remove one
        if r.agent_action == REPLACE and r.action != REPLACE:
            ok = False
        if not ok:
            bad.append(r)
    return bad


# ---------------------------------------------------------------------------
# policies


class Policy(Protocol):
    def begin_episode(self, unit: UnitTrajectory) -> None: ...

    def act(self, state: EnvState) -> int: ...


class GreedyQPolicy:
    """Greedy Q-network policy over a feature pipeline."""

    def __init__(self, q: NetworkParams, pipeline: FeaturePipeline):
        if q.d_in != pipeline.dim:
            raise DimensionError(f"network expects {q.d_in} features, pipeline {pipeline.mode} produces {pipeline.dim}")
        self.q, self.pipeline = q, pipeline
        self._actions: np.ndarray | None = None

    def begin_episode(self, unit: UnitTrajectory) -> None:
        self._actions = np.argmax(forward(self.q, self.pipeline.transform_unit(unit)), axis=1)

    def act(self, state: EnvState) -> int:
        return int(self._actions[state.t - 1])

    def values(self, unit: UnitTrajectory) -> np.ndarray:
        return forward(self.q, self.pipeline.transform_unit(unit))


class SrlaPolicy:
    """Q-network acting only inside X_s; the default action elsewhere; safety net on top.

    ``begin_episode``/``act`` replay a recorded unit. ``reset_stream``/``step``
    serve the same decision one cycle at a time from raw readings.
    """

    def __init__(self, q: NetworkParams, pipeline: FeaturePipeline, gate: Gate):
        if q.d_in != pipeline.dim:
            raise DimensionError(f"network expects {q.d_in} features, pipeline {pipeline.mode} produces {pipeline.dim}")
        self.q, self.pipeline, self.gate = q, pipeline, gate
        self.log: list[GateRecord] = []
        self._track: GateTrack | None = None
        self._agent: np.ndarray | None = None
        self._decoder: OnlineDecoder | None = None
        self._t = 0

    def begin_episode(self, unit: UnitTrajectory) -> None:
        self._unit_id = unit.unit_id
        self._track = self.gate.track(unit)
        self._agent = np.argmax(forward(self.q, self.pipeline.transform_unit(unit)), axis=1)

    def act(self, state: EnvState) -> int:
        i = state.t - 1
        tr = self._track
        agent_action = int(self._agent[i]) if tr.in_xs[i] else self.gate.default_action
        action = self.gate.decide(bool(tr.in_xs[i]), float(tr.p_fail[i]), agent_action)
        self.log.append(GateRecord(self._unit_id, state.t, int(tr.states[i]), bool(tr.in_xs[i]), float(tr.p_fail[i]),
                                   agent_action, action))
        return action

    def reset_stream(self, unit_id: int = 0) -> None:
        self._decoder = OnlineDecoder(self.gate.model)
        self._unit_id = unit_id
        self._t = 0

    def step(self, u_t: int, sensors_t, ops_t, rng: np.random.Generator | None = None,
             epsilon: float = 0.0) -> tuple[int, GateRecord]:
        return srla_act(self, u_t, sensors_t, ops_t, rng, epsilon)


def srla_act(policy: SrlaPolicy, u_t: int, sensors_t, ops_t, rng: np.random.Generator | None = None,
             epsilon: float = 0.0) -> tuple[int, GateRecord]:
    """Advance the online decoder by one cycle and choose the gated action."""
    if policy._decoder is None:
        raise PrerequisiteMissing("call reset_stream() before streaming cycles")
    gate = policy.gate
    sensors_t = np.asarray(sensors_t, dtype=float).reshape(1, -1)
    y = gate.model_norm.transform_sensors(sensors_t)[0] if gate.model_norm is not None else sensors_t[0]
    state, post = policy._decoder.step(0 if gate.model.n_inputs == 1 else int(u_t), y)
    policy._t += 1
    in_xs = state in gate.annotation.specialized_states
    p_fail = posterior_failure_mass(post, gate.annotation.failure_states)
    if in_xs:
        sc = policy.pipeline.scaler
        x = np.hstack([sc.transform_sensors(sensors_t)[0], sc.transform_ops(np.asarray(ops_t, dtype=float).reshape(1, -1))[0]])
        agent_action = act(policy.q, x, epsilon, rng if rng is not None else np.random.default_rng(0))
    else:
        agent_action = gate.default_action
    action = gate.decide(in_xs, p_fail, agent_action)
    rec = GateRecord(policy._unit_id, policy._t, int(state), bool(in_xs), float(p_fail), agent_action, action)
    policy.log.append(rec)
    return action, rec


class ExpertPolicy:
    """Rule-based expert.

    ``oracle_margin`` replaces once ``t >= T - margin`` and therefore needs the
    true failure cycle (training data only). ``rul_threshold`` replaces once
    the Monte-Carlo RUL from the currently decoded state is at most ``margin``.
    """

    def __init__(self, mode: Literal["oracle_margin", "rul_threshold"], margin: float = 10,
                 model: IohmmParams | None = None, failure_states: Iterable[int] | None = None,
                 model_norm: NormalizationSpec | None = None, rul_config: RulConfig | None = None):
        if mode not in ("oracle_margin", "rul_threshold"):
            raise ConfigError(f"unknown expert mode {mode!r}")
        if mode == "rul_threshold" and (model is None or not failure_states):
            raise PrerequisiteMissing("rul_threshold expert needs a fitted model and decoded failure states")
        self.mode, self.margin = mode, margin
        self.model, self.model_norm = model, model_norm
        self.failure_states = frozenset(int(s) for s in failure_states or ())
        self.rul_config = rul_config or RulConfig()
        self._rul_cache: dict[tuple[int, int], float] = {}
        self._labels: np.ndarray | None = None

    def mean_rul(self, state: int, u_last: int) -> float:
        key = (state, u_last)
        if key not in self._rul_cache:
            if state in self.failure_states:
                self._rul_cache[key] = 0.0
            else:
                mask = np.zeros(self.model.n_states, dtype=bool)
                mask[sorted(self.failure_states)] = True
                cfg = RulConfig(self.rul_config.n_rollouts, self.rul_config.horizon_cap, "hold_last", self.rul_config.seed)
                lengths, _ = rollout_lengths(self.model, state, mask, [u_last], cfg)
                self._rul_cache[key] = float(lengths.mean())
        return self._rul_cache[key]

    def label_unit(self, unit: UnitTrajectory) -> np.ndarray:
        """Expert action at every cycle of ``unit``."""
        t = np.arange(1, unit.length + 1)
        if self.mode == "oracle_margin":
            return (t >= unit.length - self.margin).astype(np.int64)
        dec = decode_online(self.model, unit, self.model_norm)
        u = unit_inputs(self.model, unit)
        return np.array([int(self.mean_rul(int(s), int(ui)) <= self.margin) for s, ui in zip(dec.states, u)], dtype=np.int64)

    def begin_episode(self, unit: UnitTrajectory) -> None:
        self._labels = self.label_unit(unit)

    def act(self, state: EnvState) -> int:
        return int(self._labels[state.t - 1])


def build_expert(mode: str, margin: float = 10, **kw) -> ExpertPolicy:
    return ExpertPolicy(mode, margin, **kw)


# ---------------------------------------------------------------------------
# behavior cloning


@dataclass
class BcReport:
    n_pairs: int
    train_agreement: float
    holdout_agreement: float
    history: list[float]


def expert_pairs(expert: ExpertPolicy, data: RunToFailureDataset, pipeline: FeaturePipeline,
                 gate: Gate | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(features, expert action) at every cycle, restricted to gated cycles when a gate is given."""
    xs, ys = [], []
    for unit in data.units:
        x = pipeline.transform_unit(unit)
        a = expert.label_unit(unit)
        if gate is not None:
            keep = gate.track(unit).in_xs
            x, a = x[keep], a[keep]
        xs.append(x)
        ys.append(a)
    if not xs:
        return np.empty((0, pipeline.dim)), np.empty(0, dtype=np.int64)
    return np.vstack(xs), np.concatenate(ys)


def pretrain_bc(
    expert: ExpertPolicy,
    train: RunToFailureDataset,
    pipeline: FeaturePipeline,
    config: BcConfig | None = None,
    gate: Gate | None = None,
    holdout: RunToFailureDataset | None = None,
    init_params: NetworkParams | None = None,
    n_actions: int = 2,
) -> tuple[NetworkParams, BcReport]:
    config = config or BcConfig()
    q0 = init_params if init_params is not None else init_network(pipeline.dim, n_actions, config.seed)
    if q0.d_in != pipeline.dim:
        raise DimensionError(f"network expects {q0.d_in} features, pipeline {pipeline.mode} produces {pipeline.dim}")
    x, a = expert_pairs(expert, train, pipeline, gate)
    if len(x) == 0:
        raise PrerequisiteMissing("no expert pairs were collected (is the gate empty on the training units?)")
    q, hist = clone_behavior(q0, x, a, config)
    held = float("nan")
    if holdout is not None and len(holdout):
        hx, ha = expert_pairs(expert, holdout, pipeline, gate)
        held = agreement(q, hx, ha)
    report = BcReport(len(x), agreement(q, x, a), held, hist)
    log.info("behavior cloning: %d pairs, train agreement %.4f, holdout %.4f", len(x), report.train_agreement, held)
    return q, report


# ---------------------------------------------------------------------------
# DQN


@dataclass
class EpisodeLog:
    episode: int
    unit_id: int
    loss: float
    cost: float
    epsilon: float
    failed: bool
    updates: int


@dataclass
class TrainingLog:
    episodes: list[EpisodeLog] = field(default_factory=list)
    stop_reason: str = ""
    total_updates: int = 0

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "unit", "loss", "cost", "epsilon", "failed", "updates"])
            for e in self.episodes:
                w.writerow([e.episode, e.unit_id, repr(e.loss), repr(e.cost), repr(e.epsilon), int(e.failed), e.updates])
        return path


def _step(q: NetworkParams, x, actions, targets, cfg: TrainStepConfig, episode: int) -> float:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return train_step(q, x, actions, targets, cfg)[1]
    except NumericalError as exc:
        raise DivergenceError(f"non-finite TD target in episode {episode}: {exc}") from exc


def train_dqn(
    train: RunToFailureDataset,
    pipeline: FeaturePipeline,
    config: AgentConfig | None = None,
    env_config: EnvConfig | None = None,
    init_params: NetworkParams | None = None,
    seed: int = 0,
    gate: Gate | None = None,
) -> tuple[NetworkParams, TrainingLog]:
    """Online Q-learning with a periodically refreshed target network.

    With a ``gate`` the agent chooses and learns only on cycles whose decoded
    state lies in X_s; elsewhere the gate's default action is taken. Training
    stops when the mean episode loss over the last ``loss_window`` episodes
    with updates falls below ``loss_threshold``, or after ``max_episodes``.
    """
    config = (config or AgentConfig()).validate()
    env_config = (env_config or EnvConfig()).validate()
    rng = np.random.default_rng(seed)
    env = MaintenanceEnv(train, env_config, pipeline.observer(train), rng)
    n_actions = env.n_actions
    q = init_params.copy() if init_params is not None else init_network(pipeline.dim, n_actions, seed)
    if q.d_in != pipeline.dim or q.n_outputs != n_actions:
        raise DimensionError(f"network shape {q.sizes} does not fit {pipeline.dim} features and {n_actions} actions")
    target = q.copy()
    step_cfg = TrainStepConfig(config.lr, config.clip_norm)
    tracks = [gate.track(u) for u in train.units] if gate is not None else None
    buffer: deque = deque(maxlen=config.replay_capacity)
    log_ = TrainingLog()
    recent: deque = deque(maxlen=config.loss_window)
    updates = 0

    for episode in range(config.max_episodes):
        eps = epsilon_at(config, episode)
        s = env.reset()
        tr = tracks[s.unit_index] if tracks is not None else None
        losses = []
        while True:
            x = s.observation
            if tr is not None:
                i = s.t - 1
                learn = bool(tr.in_xs[i])
                agent_action = act(q, x, eps, rng) if learn else gate.default_action
                a = gate.decide(learn, float(tr.p_fail[i]), agent_action)
            else:
                learn = True
                a = act(q, x, eps, rng)
            failing = s.t >= s.failure_cycle
            s2, r, done = env.step(a)
            if learn:
                # every action at the failure cycle earns the same terminal reward,
                # so all outputs get the target (the safety net would otherwise hide hold's)
                taken = range(n_actions) if failing else (a,)
                if config.replay:
                    for b in taken:
                        buffer.append((x, b, r, None if done else s2.observation, done))
                    if len(buffer) >= config.batch_size:
                        idx = rng.integers(len(buffer), size=config.batch_size)
                        batch = [buffer[j] for j in idx]
                        bx = np.array([b[0] for b in batch])
                        ba = np.array([b[1] for b in batch])
                        nxt = [b[3] for b in batch]
                        live = np.array([n is not None for n in nxt])
                        y = np.array([b[2] for b in batch], dtype=float)
                        if live.any():
                            y[live] += config.gamma * forward(target, np.array([n for n in nxt if n is not None])).max(1)
                        loss = _step(q, bx, ba, y, step_cfg, episode)
                        losses.append(loss)
                        updates += 1
                else:
                    nxt_max = 0.0 if done else float(forward(target, s2.observation).max())
                    y = td_target(r, nxt_max, done, config.gamma)
                    loss = _step(q, np.repeat(x[None, :], len(taken), 0), list(taken), [y] * len(taken), step_cfg, episode)
                    losses.append(loss)
                    updates += 1
                if losses and not np.isfinite(losses[-1]):
                    raise DivergenceError(f"training loss became {losses[-1]} in episode {episode} (unit {s.unit_id}, t={s.t})")
                if updates and updates % config.target_refresh == 0:
                    target = q.copy()
            if done:
                break
            s = s2
        tr_ = env.trace
        last = tr_[-1]
        ep_loss = float(np.mean(losses)) if losses else float("nan")
        log_.episodes.append(EpisodeLog(episode, last.unit_id, ep_loss, float(-sum(t.reward for t in tr_)), eps,
                                        last.t >= last.failure_cycle, len(losses)))
        if losses:
            recent.append(ep_loss)
            if len(recent) == config.loss_window and float(np.mean(recent)) < config.loss_threshold:
                log_.stop_reason = f"loss below {config.loss_threshold} after {episode + 1} episodes"
                break
    else:
        log_.stop_reason = f"episode cap {config.max_episodes} reached"
    log_.total_updates = updates
    q.metadata = {"pipeline": pipeline.mode, "agent_config": asdict(config), "seed": seed}
    return q, log_


def state_values_by_state(q: NetworkParams, pipeline: FeaturePipeline, gate: Gate,
                          data: RunToFailureDataset) -> np.ndarray:
    """Mean max-Q value over the cycles decoded to each state; NaN for states never visited."""
    n = gate.model.n_states
    sums = np.zeros(n)
    counts = np.zeros(n)
    for unit in data.units:
        v = forward(q, pipeline.transform_unit(unit)).max(1)
        s = gate.track(unit).states
        np.add.at(sums, s, v)
        np.add.at(counts, s, 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def agent_config_dict(config: AgentConfig) -> dict:
    return asdict(config)
