"""Input-output hidden Markov model with discrete inputs and diagonal Gaussian emissions.

The input symbol ``u_t`` selects the transition matrix used to *enter* the
state at cycle ``t`` and the emission density at ``t``::

    P(x_1 = i)                     = pi[i]
    P(x_t = j | x_{t-1} = i, u_t)  = A[u_t, i, j]
    p(y_t | x_t = j, u_t)          = N(y_t; means[j, u_t], diag(vars[j, u_t]))

With a single input symbol this is an ordinary Gaussian HMM.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
from numba import njit
from scipy.cluster.vq import kmeans2

from . import _io
from .data import RunToFailureDataset
from .errors import ConfigError, DatasetError, DimensionError, InvariantError, NumericalError

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
ROW_TOL = 1e-9
# (state, input) cells and transition rows with less expected mass than this keep their previous values
EMPTY_MASS = 1e-12
SMOOTHING = 1e-3


@dataclass
class IohmmParams:
    pi: np.ndarray
    A: np.ndarray
    means: np.ndarray
    vars: np.ndarray
    var_floor: float = 1e-6

    SCHEMA = "srla/iohmm"
    VERSION = 1

    def __post_init__(self) -> None:
        self.pi = np.ascontiguousarray(self.pi, dtype=float)
        self.A = np.ascontiguousarray(self.A, dtype=float)
        self.means = np.ascontiguousarray(self.means, dtype=float)
        self.vars = np.ascontiguousarray(self.vars, dtype=float)

    @property
    def n_states(self) -> int:
        return self.pi.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.A.shape[0]

    @property
    def n_features(self) -> int:
        return self.means.shape[2]

    def validate(self) -> "IohmmParams":
        n = self.n_states
        if self.A.ndim != 3 or self.A.shape[1:] != (n, n):
            raise InvariantError(f"A must have shape (K_u, {n}, {n}), got {self.A.shape}")
        if self.means.ndim != 3 or self.means.shape[:2] != (n, self.n_inputs):
            raise InvariantError(f"means must have shape ({n}, {self.n_inputs}, d_y), got {self.means.shape}")
        if self.vars.shape != self.means.shape:
            raise InvariantError("vars and means shapes differ")
        for name, arr in (("pi", self.pi), ("A", self.A), ("means", self.means), ("vars", self.vars)):
            if not np.all(np.isfinite(arr)):
                raise InvariantError(f"{name} contains non-finite values")
        if (self.pi < 0).any() or abs(self.pi.sum() - 1.0) > ROW_TOL:
            raise InvariantError(f"pi must be a probability vector (sum={float(self.pi.sum())!r})")
        rows = self.A.sum(-1)
        if (self.A < 0).any() or np.abs(rows - 1.0).max() > ROW_TOL:
            bad = np.unravel_index(np.abs(rows - 1.0).argmax(), rows.shape)
            raise InvariantError(f"A[{bad[0]}] row {bad[1]} sums to {float(rows[bad])!r}, expected 1")
        if (self.vars < self.var_floor).any():
            raise InvariantError(f"variance below floor {self.var_floor}")
        return self

    def copy(self) -> "IohmmParams":
        return IohmmParams(self.pi.copy(), self.A.copy(), self.means.copy(), self.vars.copy(), self.var_floor)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_inputs": self.n_inputs,
            "n_features": self.n_features,
            "var_floor": self.var_floor,
            "pi": self.pi,
            "A": self.A,
            "means": self.means,
            "vars": self.vars,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IohmmParams":
        p = cls(d["pi"], d["A"], d["means"], d["vars"], float(d.get("var_floor", 1e-6)))
        if (p.n_states, p.n_inputs, p.n_features) != (d["n_states"], d["n_inputs"], d["n_features"]):
            raise InvariantError("declared dimensions disagree with the stored arrays")
        return p.validate()


@dataclass
class PosteriorSequence:
    gamma: np.ndarray
    log_scales: np.ndarray
    log_likelihood: float


@dataclass
class ViterbiPath:
    states: np.ndarray
    log_prob: float


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _forward_kernel(pi, A, u, logB):
    T, N = logB.shape
    alpha = np.empty((T, N))
    logc = np.empty(T)
    pred = np.empty(N)
    a = np.empty(N)
    for t in range(T):
        if t == 0:
            pred[:] = pi
        else:
            Au = A[u[t]]
            for j in range(N):
                s = 0.0
                for i in range(N):
                    s += alpha[t - 1, i] * Au[i, j]
                pred[j] = s
        m = logB[t, 0]
        for j in range(1, N):
            if logB[t, j] > m:
                m = logB[t, j]
        tot = 0.0
        for j in range(N):
            a[j] = pred[j] * np.exp(logB[t, j] - m)
            tot += a[j]
        if tot > 1e-280:
            for j in range(N):
                alpha[t, j] = a[j] / tot
            logc[t] = np.log(tot) + m
        else:
            # the likely states are (numerically) unreachable: redo the step in log space
            mm = -np.inf
            for j in range(N):
                a[j] = np.log(pred[j]) + logB[t, j] if pred[j] > 0.0 else -np.inf
                if a[j] > mm:
                    mm = a[j]
            if mm == -np.inf:
                return alpha, logc, False
            tot = 0.0
            for j in range(N):
                a[j] = np.exp(a[j] - mm)
                tot += a[j]
            for j in range(N):
                alpha[t, j] = a[j] / tot
            logc[t] = mm + np.log(tot)
    return alpha, logc, True


@njit(cache=True)
def _backward_kernel(A, u, logB, alpha, n_inputs):
    T, N = logB.shape
    beta = np.ones((T, N))
    counts = np.zeros((n_inputs, N, N))
    bs = np.empty(N)
    for t in range(T - 1, 0, -1):
        m = logB[t, 0]
        for j in range(1, N):
            if logB[t, j] > m:
                m = logB[t, j]
        for j in range(N):
            bs[j] = np.exp(logB[t, j] - m) * beta[t, j]
        Au = A[u[t]]
        tot = 0.0
        for i in range(N):
            for j in range(N):
                tot += alpha[t - 1, i] * Au[i, j] * bs[j]
        if tot > 0.0:
            c = counts[u[t]]
            for i in range(N):
                ai = alpha[t - 1, i] / tot
                for j in range(N):
                    c[i, j] += ai * Au[i, j] * bs[j]
        mx = 0.0
        for i in range(N):
            s = 0.0
            for j in range(N):
                s += Au[i, j] * bs[j]
            beta[t - 1, i] = s
            if s > mx:
                mx = s
        if mx > 0.0:
            for i in range(N):
                beta[t - 1, i] /= mx
    gamma = alpha * beta
    for t in range(T):
        s = 0.0
        for i in range(N):
            s += gamma[t, i]
        if s > 0.0:
            for i in range(N):
                gamma[t, i] /= s
    return gamma, counts


@njit(cache=True)
def _viterbi_kernel(log_pi, logA, u, logB):
    T, N = logB.shape
    back = np.zeros((T, N), dtype=np.int64)
    delta = log_pi + logB[0]
    new = np.empty(N)
    for t in range(1, T):
        lA = logA[u[t]]
        for j in range(N):
            best = -np.inf
            arg = 0
            for i in range(N):
                v = delta[i] + lA[i, j]
                if v > best:  # strict: ties keep the lower index
                    best = v
                    arg = i
            new[j] = best + logB[t, j]
            back[t, j] = arg
        delta[:] = new
    last = 0
    best = delta[0]
    for j in range(1, N):
        if delta[j] > best:
            best = delta[j]
            last = j
    path = np.empty(T, dtype=np.int64)
    path[T - 1] = last
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, best


# ---------------------------------------------------------------------------
# inference


def _check(params: IohmmParams, u, y) -> tuple[np.ndarray, np.ndarray]:
    u = np.ascontiguousarray(u, dtype=np.int64).reshape(-1)
    y = np.ascontiguousarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[0] != u.shape[0]:
        raise DimensionError(f"{u.shape[0]} input symbols vs observation matrix of shape {y.shape}")
    if y.shape[0] == 0:
        raise DimensionError("empty sequence")
    if y.shape[1] != params.n_features:
        raise DimensionError(f"observations have {y.shape[1]} features, model expects {params.n_features}")
    if u.min() < 0 or u.max() >= params.n_inputs:
        raise DimensionError(f"input symbols must lie in [0, {params.n_inputs})")
    return u, y


def log_emissions(params: IohmmParams, u, y) -> np.ndarray:
    """Per-cycle, per-state Gaussian log densities, shape ``(T, N)``."""
    u, y = _check(params, u, y)
    out = np.empty((y.shape[0], params.n_states))
    for k in np.unique(u):
        sel = u == k
        var = params.vars[:, k]
        norm = -0.5 * (LOG_2PI * params.n_features + np.log(var).sum(1))
        diff = y[sel][None, :, :] - params.means[:, k][:, None, :]
        out[sel] = (norm[:, None] - 0.5 * (diff * diff / var[:, None, :]).sum(-1)).T
    return out


def _forward(params: IohmmParams, u: np.ndarray, logB: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    alpha, logc, ok = _forward_kernel(params.pi, params.A, u, logB)
    if not ok:
        raise NumericalError("forward pass reached a cycle with zero probability under every state")
    return alpha, logc


def posterior_gamma(params: IohmmParams, u, y) -> PosteriorSequence:
    """Smoothed state posteriors P(x_t = i | U, Y) by scaled forward-backward."""
    u, y = _check(params, u, y)
    logB = log_emissions(params, u, y)
    alpha, logc = _forward(params, u, logB)
    gamma, _ = _backward_kernel(params.A, u, logB, alpha, params.n_inputs)
    return PosteriorSequence(gamma, logc, float(logc.sum()))


def filtered_posterior(params: IohmmParams, u, y) -> np.ndarray:
    """Causal posteriors P(x_t = i | u_1..t, y_1..t); row t uses no later data."""
    u, y = _check(params, u, y)
    alpha, _ = _forward(params, u, log_emissions(params, u, y))
    return alpha


def log_likelihood(params: IohmmParams, u, y) -> float:
    u, y = _check(params, u, y)
    _, logc = _forward(params, u, log_emissions(params, u, y))
    return float(logc.sum())


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def viterbi(params: IohmmParams, u, y) -> ViterbiPath:
    """Most probable state path, computed in log space; ties go to the lower state index."""
    u, y = _check(params, u, y)
    logB = log_emissions(params, u, y)
    path, lp = _viterbi_kernel(_log(params.pi), _log(params.A), u, logB)
    return ViterbiPath(path, float(lp))


def path_log_prob(params: IohmmParams, u, y, states) -> float:
    """Joint log P(states, Y | U) of one explicit path."""
    u, y = _check(params, u, y)
    states = np.asarray(states, dtype=np.int64)
    logB = log_emissions(params, u, y)
    lp = _log(params.pi[states[0]]) + logB[0, states[0]]
    for t in range(1, len(states)):
        lp += _log(params.A[u[t], states[t - 1], states[t]]) + logB[t, states[t]]
    return float(lp)


def argmax_states(post: PosteriorSequence) -> np.ndarray:
    """Individually most likely state per cycle (may differ from the Viterbi path)."""
    return np.argmax(post.gamma, axis=1)


class OnlineDecoder:
    """Incremental Viterbi scores and filtered posteriors over a growing prefix.

    After ``step`` at cycle t, ``state`` equals the final state of
    ``viterbi(params, u[:t], y[:t])`` and ``posterior`` equals row t of
    ``filtered_posterior``. Each step costs O(N^2).
    """

    def __init__(self, params: IohmmParams):
        self.params = params
        self._log_pi = _log(params.pi)
        self._log_A = _log(params.A)
        self.reset()

    def reset(self) -> None:
        self.t = 0
        self.delta: np.ndarray | None = None
        self.posterior: np.ndarray | None = None
        self.state: int | None = None

    def step(self, u_t: int, y_t) -> tuple[int, np.ndarray]:
        p = self.params
        y_t = np.asarray(y_t, dtype=float).reshape(1, -1)
        lb = log_emissions(p, np.array([u_t]), y_t)[0]
        if self.t == 0:
            delta = self._log_pi + lb
            pred = p.pi
        else:
            delta = (self.delta[:, None] + self._log_A[u_t]).max(axis=0) + lb
            pred = self.posterior @ p.A[u_t]
        # shift keeps scores bounded without changing the argmax
        self.delta = delta - delta.max()
        la = _log(pred) + lb
        w = np.exp(la - la.max())
        self.posterior = w / w.sum()
        self.state = int(np.argmax(self.delta))
        self.t += 1
        return self.state, self.posterior


# ---------------------------------------------------------------------------
# sampling


def sample_next(params: IohmmParams, current_state: int, input_symbol: int, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Draw the next state from ``A[u][s]`` and an observation from its emission under ``u``."""
    if not 0 <= current_state < params.n_states:
        raise ConfigError(f"invalid state index {current_state}")
    if not 0 <= input_symbol < params.n_inputs:
        raise ConfigError(f"invalid input symbol {input_symbol}")
    row = np.cumsum(params.A[input_symbol, current_state])
    nxt = min(int(np.searchsorted(row, rng.random() * row[-1], side="right")), params.n_states - 1)
    obs = params.means[nxt, input_symbol] + np.sqrt(params.vars[nxt, input_symbol]) * rng.standard_normal(params.n_features)
    return nxt, obs


@dataclass
class SampledTrajectory:
    states: np.ndarray
    inputs: np.ndarray
    observations: np.ndarray


def sample_sequence(
    params: IohmmParams,
    input_policy: Callable[[int], int] | Sequence[int] | int,
    horizon: int,
    rng: np.random.Generator,
) -> SampledTrajectory:
    """Sample ``horizon`` cycles; ``input_policy`` is a symbol, a sequence, or ``f(t) -> symbol``."""
    if callable(input_policy):
        inputs = [int(input_policy(t)) for t in range(horizon)]
    elif np.isscalar(input_policy):
        inputs = [int(input_policy)] * horizon
    else:
        inputs = [int(v) for v in input_policy][:horizon]
        if len(inputs) < horizon:
            raise ConfigError("input sequence shorter than horizon")
    cum = np.cumsum(params.pi)
    x = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), params.n_states - 1)
    u0 = inputs[0]
    states = [x]
    obs = [params.means[x, u0] + np.sqrt(params.vars[x, u0]) * rng.standard_normal(params.n_features)]
    for t in range(1, horizon):
        x, y = sample_next(params, x, inputs[t], rng)
        states.append(x)
        obs.append(y)
    return SampledTrajectory(np.array(states), np.array(inputs), np.array(obs))


# ---------------------------------------------------------------------------
# EM


@dataclass
class EmConfig:
    tol: float = 1e-5
    max_epochs: int = 1000
    n_restarts: int = 3
    seed: int = 0
    init: Literal["kmeans", "life_fraction"] = "kmeans"
    var_floor: float = 1e-6


@dataclass
class EmStats:
    log_likelihood: float
    pi: np.ndarray
    trans: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray


Sequences = Sequence[tuple[np.ndarray, np.ndarray]]


def _sequences(data: RunToFailureDataset) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(np.ascontiguousarray(u.symbols(), dtype=np.int64), np.ascontiguousarray(u.sensors)) for u in data.units]


def e_step(params: IohmmParams, seqs: Sequences) -> EmStats:
    """Expected sufficient statistics and total log-likelihood at ``params``."""
    n, k = params.n_states, params.n_inputs
    u_all = np.concatenate([s[0] for s in seqs])
    y_all = np.vstack([s[1] for s in seqs])
    logB_all = log_emissions(params, u_all, y_all)
    gamma_all = np.empty_like(logB_all)
    pi = np.zeros(n)
    trans = np.zeros((k, n, n))
    ll = 0.0
    start = 0
    for u, _ in seqs:
        stop = start + len(u)
        logB = logB_all[start:stop]
        alpha, logc = _forward(params, u, logB)
        gamma, counts = _backward_kernel(params.A, u, logB, alpha, k)
        gamma_all[start:stop] = gamma
        ll += logc.sum()
        pi += gamma[0]
        trans += counts
        start = stop
    if not np.isfinite(ll):
        raise NumericalError(f"log-likelihood is {ll}; check observation scaling")
    s0 = np.empty((n, k))
    s1 = np.empty((n, k, y_all.shape[1]))
    s2 = np.empty_like(s1)
    for sym in range(k):
        sel = u_all == sym
        g, y = gamma_all[sel], y_all[sel]
        s0[:, sym] = g.sum(0)
        s1[:, sym] = g.T @ y
        s2[:, sym] = g.T @ (y * y)
    return EmStats(float(ll), pi, trans, s0, s1, s2)


def m_step(params: IohmmParams, stats: EmStats) -> IohmmParams:
    new = params.copy()
    new.pi = stats.pi / stats.pi.sum()
    rows = stats.trans.sum(-1, keepdims=True)
    filled = rows > EMPTY_MASS
    unused = (params.A + SMOOTHING) / (1.0 + params.n_states * SMOOTHING)
    new.A = np.where(filled, stats.trans / np.where(filled, rows, 1.0), unused)
    new.A /= new.A.sum(-1, keepdims=True)
    cell = stats.s0 > EMPTY_MASS
    w = np.where(cell, stats.s0, 1.0)[:, :, None]
    mean = stats.s1 / w
    var = np.maximum(stats.s2 / w - mean ** 2, params.var_floor)
    new.means = np.where(cell[:, :, None], mean, params.means)
    new.vars = np.where(cell[:, :, None], var, params.vars)
    return new


def _best_kmeans(x: np.ndarray, k: int, rng: np.random.Generator, n_init: int = 10) -> tuple[np.ndarray, np.ndarray]:
    best = None
    for _ in range(n_init):
        cents, labels = kmeans2(x, k, minit="++", seed=rng)
        inertia = ((x - cents[labels]) ** 2).sum()
        if best is None or inertia < best[0]:
            best = (inertia, cents, labels)
    return best[1], best[2]


def _init_params(seqs: Sequences, n_states: int, n_inputs: int, config: EmConfig, rng: np.random.Generator) -> IohmmParams:
    y = np.vstack([s[1] for s in seqs])
    u = np.concatenate([s[0] for s in seqs])
    d = y.shape[1]
    regime = np.zeros((n_inputs, d))
    for k in range(n_inputs):
        if (u == k).any():
            regime[k] = y[u == k].mean(0)
    yc = y - regime[u]
    if config.init == "kmeans":
        cents, labels = _best_kmeans(yc, n_states, rng)
    elif config.init == "life_fraction":
        labels = np.concatenate([np.minimum((np.arange(len(s[0])) * n_states) // len(s[0]), n_states - 1) for s in seqs])
        cents = np.array([yc[labels == i].mean(0) if (labels == i).any() else yc[rng.integers(len(yc))] for i in range(n_states)])
    else:
        raise ConfigError(f"unknown EM init {config.init!r}")
    gvar = np.maximum(yc.var(0), config.var_floor)
    var = np.empty((n_states, d))
    for i in range(n_states):
        members = yc[labels == i]
        if len(members) < 2:
            cents[i] = yc[rng.integers(len(yc))]
            var[i] = gvar
        else:
            var[i] = np.maximum(members.var(0), config.var_floor)
    means = cents[:, None, :] + regime[None, :, :]
    vars_ = np.broadcast_to(var[:, None, :], means.shape).copy()
    A = 1.0 + 0.1 * rng.random((n_inputs, n_states, n_states))
    A /= A.sum(-1, keepdims=True)
    pi = 1.0 + 0.1 * rng.random(n_states)
    pi /= pi.sum()
    return IohmmParams(pi, A, means, vars_, config.var_floor).validate()


def em_converged(previous_ll: float, current_ll: float, tol: float) -> bool:
    """Absolute change of the log-likelihood between consecutive epochs below ``tol``."""
    return abs(current_ll - previous_ll) < tol


def _run_em(params: IohmmParams, seqs: Sequences, config: EmConfig) -> tuple[IohmmParams, list[float]]:
    trace: list[float] = []
    for epoch in range(config.max_epochs):
        stats = e_step(params, seqs)
        trace.append(stats.log_likelihood)
        if epoch > 0 and em_converged(trace[-2], trace[-1], config.tol):
            break
        if epoch == config.max_epochs - 1:
            break
        params = m_step(params, stats).validate()
    return params, trace


def fit_sequences(seqs: Sequences, n_states: int, n_inputs: int, config: EmConfig | None = None,
                  init_params: IohmmParams | None = None) -> tuple[IohmmParams, list[float]]:
    """EM over explicit ``(u, y)`` sequences; returns the best restart and its log-likelihood trace."""
    config = config or EmConfig()
    seqs = [(np.ascontiguousarray(u, dtype=np.int64), np.ascontiguousarray(y, dtype=float)) for u, y in seqs]
    if not seqs:
        raise DatasetError("cannot fit on an empty dataset")
    total = sum(len(u) for u, _ in seqs)
    if n_states < 2:
        raise ConfigError("n_states must be at least 2")
    if n_states > total:
        raise ConfigError(f"n_states={n_states} exceeds the {total} available cycles")
    if config.max_epochs < 1 or config.n_restarts < 1:
        raise ConfigError("max_epochs and n_restarts must be positive")
    if init_params is not None:
        return _run_em(init_params.copy().validate(), seqs, config)
    best: tuple[IohmmParams, list[float]] | None = None
    for r, child in enumerate(np.random.SeedSequence(config.seed).spawn(config.n_restarts)):
        rng = np.random.default_rng(child)
        params, trace = _run_em(_init_params(seqs, n_states, n_inputs, config, rng), seqs, config)
        log.info("EM restart %d: %d epochs, log-likelihood %.6f", r, len(trace), trace[-1])
        # strict comparison: ties keep the lowest restart index
        if best is None or trace[-1] > best[1][-1]:
            best = (params, trace)
    return best


def fit_em(train: RunToFailureDataset, n_states: int, config: EmConfig | None = None) -> tuple[IohmmParams, list[float]]:
    """Fit an IOHMM to the (normalized) sensors of ``train`` using its input symbols."""
    if not train.units:
        raise DatasetError("cannot fit on an empty dataset")
    if not train.has_symbols():
        raise DatasetError("input symbols missing; run discretize_operating_conditions first")
    return fit_sequences(_sequences(train), n_states, train.n_inputs, config)


def fit_hmm(train: RunToFailureDataset, n_states: int, config: EmConfig | None = None) -> tuple[IohmmParams, list[float]]:
    """Plain Gaussian HMM: every cycle gets input symbol 0."""
    seqs = [(np.zeros(u.length, dtype=np.int64), u.sensors) for u in train.units]
    return fit_sequences(seqs, n_states, 1, config)


def dataset_sequences(data: RunToFailureDataset, use_inputs: bool = True) -> list[tuple[np.ndarray, np.ndarray]]:
    if use_inputs:
        return _sequences(data)
    return [(np.zeros(u.length, dtype=np.int64), np.ascontiguousarray(u.sensors)) for u in data.units]


# ---------------------------------------------------------------------------
# persistence


def save_model(params: IohmmParams, path: str | Path, metadata: dict | None = None) -> Path:
    """Write the model document; ``metadata`` carries the normalizer, alphabet and training config."""
    return _io.write_document(path, IohmmParams.SCHEMA, IohmmParams.VERSION,
                              {**params.to_dict(), "metadata": metadata or {}})


def load_model(path: str | Path, with_metadata: bool = False):
    doc = _io.read_document(path, IohmmParams.SCHEMA, IohmmParams.VERSION)
    params = IohmmParams.from_dict(doc)
    return (params, doc.get("metadata", {})) if with_metadata else params


def em_config_dict(config: EmConfig) -> dict:
    return asdict(config)
