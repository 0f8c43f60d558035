"""Small fully connected network used for Q-values and behavior cloning.

Hidden layers use ReLU, the output layer is linear. Weights are stored as
``[fan_in, fan_out]`` so a batch ``X`` of shape ``[n, d_in]`` maps through
``X @ W + b``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _io
from .errors import ConfigError, DimensionError, InvariantError, NumericalError

HIDDEN = (128, 256)


@dataclass
class NetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int | None = None
    metadata: dict = field(default_factory=dict)

    SCHEMA = "srla/network"
    VERSION = 1

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    def validate(self) -> "NetworkParams":
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvariantError("weights and biases must pair up layer by layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvariantError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k and w.shape[0] != self.weights[k - 1].shape[1]:
                raise InvariantError(f"layer {k} expects {w.shape[0]} inputs, previous layer gives {self.weights[k - 1].shape[1]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvariantError(f"layer {k} has non-finite parameters")
        return self

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed, dict(self.metadata))

    def to_dict(self) -> dict:
        return {"sizes": self.sizes, "seed": self.seed, "weights": self.weights, "biases": self.biases,
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkParams":
        p = cls([np.asarray(w, dtype=float) for w in d["weights"]], [np.asarray(b, dtype=float) for b in d["biases"]],
                d.get("seed"), d.get("metadata", {}))
        p.validate()
        if p.sizes != list(d["sizes"]):
            raise InvariantError(f"declared sizes {d['sizes']} disagree with stored arrays {p.sizes}")
        return p


def init_network(d_in: int, n_actions: int, seed: int, hidden: Sequence[int] = HIDDEN) -> NetworkParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    sizes = [d_in, *hidden, n_actions]
    if min(sizes) < 1:
        raise ConfigError(f"layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return NetworkParams(weights, biases, seed)


def _as_batch(params: NetworkParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x[None, :] if single else x
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise DimensionError(f"network expects {params.d_in} input features, got shape {np.shape(x)}")
    return x, single


def forward(params: NetworkParams, x) -> np.ndarray:
    """Per-action outputs for one input vector or a batch of them."""
    h, single = _as_batch(params, x)
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def _forward_cache(params: NetworkParams, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    last = len(params.weights) - 1
    h = x
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def backward(params: NetworkParams, acts: list[np.ndarray], d_out: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Parameter gradients given the loss gradient with respect to the outputs."""
    gw = [np.empty(0)] * len(params.weights)
    gb = [np.empty(0)] * len(params.weights)
    delta = d_out
    for k in range(len(params.weights) - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(0)
        if k:
            delta = (delta @ params.weights[k].T) * (acts[k] > 0)
    return gw, gb


def mse_selected(params: NetworkParams, x, actions, targets) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean squared error on the chosen action's output and its gradients.

    Outputs of actions that were not taken receive no gradient.
    """
    x, _ = _as_batch(params, x)
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if not (len(x) == len(actions) == len(targets)) or len(x) == 0:
        raise DimensionError("batch must be nonempty with one action and one target per row")
    if not np.all(np.isfinite(targets)):
        raise NumericalError("non-finite target value in batch")
    acts = _forward_cache(params, x)
    rows = np.arange(len(x))
    err = acts[-1][rows, actions] - targets
    d_out = np.zeros_like(acts[-1])
    d_out[rows, actions] = 2.0 * err / len(x)
    gw, gb = backward(params, acts, d_out)
    return float(np.mean(err ** 2)), gw, gb


def behavior_loss(params: NetworkParams, x, expert_actions) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Half squared distance between the output vector and the expert's one-hot action, batch mean."""
    x, _ = _as_batch(params, x)
    expert_actions = np.asarray(expert_actions, dtype=np.int64).reshape(-1)
    acts = _forward_cache(params, x)
    target = np.eye(params.n_outputs)[expert_actions]
    diff = acts[-1] - target
    gw, gb = backward(params, acts, diff / len(x))
    return float(0.5 * (diff ** 2).sum(1).mean()), gw, gb


@dataclass
class TrainStepConfig:
    lr: float = 1e-4
    clip_norm: float | None = None

    def validate(self) -> "TrainStepConfig":
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive when set")
        return self


def apply_gradients(params: NetworkParams, gw, gb, lr: float, clip_norm: float | None = None) -> float:
    """In-place gradient-descent update; returns the gradient norm before clipping."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in gw) + sum(float((g * g).sum()) for g in gb)))
    scale = lr
    if clip_norm is not None and norm > clip_norm:
        scale = lr * clip_norm / norm
    for w, g in zip(params.weights, gw):
        w -= scale * g
    for b, g in zip(params.biases, gb):
        b -= scale * g
    return norm


def train_step(params: NetworkParams, x, actions, targets, config: TrainStepConfig | None = None) -> tuple[NetworkParams, float]:
    """One gradient step on the selected-action MSE. Updates ``params`` in place and returns it with the pre-step loss."""
    config = config or TrainStepConfig()
    loss, gw, gb = mse_selected(params, x, actions, targets)
    apply_gradients(params, gw, gb, config.lr, config.clip_norm)
    return params, loss


@dataclass
class BcConfig:
    lr: float = 1e-2
    epochs: int = 50
    batch_size: int = 64
    clip_norm: float | None = 10.0
    seed: int = 0


def clone_behavior(params: NetworkParams, states, expert_actions, config: BcConfig | None = None) -> tuple[NetworkParams, list[float]]:
    """Fit the network outputs to one-hot expert actions by minibatch gradient descent.

    Returns a trained copy and the per-epoch mean loss.
    """
    config = config or BcConfig()
    states = np.asarray(states, dtype=float)
    expert_actions = np.asarray(expert_actions, dtype=np.int64)
    if len(states) == 0:
        raise ConfigError("expert set is empty")
    if len(states) != len(expert_actions):
        raise DimensionError("states and expert actions differ in length")
    if expert_actions.min() < 0 or expert_actions.max() >= params.n_outputs:
        raise ConfigError("expert action outside the network's action range")
    out = params.copy()
    rng = np.random.default_rng(config.seed)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(states))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, gw, gb = behavior_loss(out, states[idx], expert_actions[idx])
            apply_gradients(out, gw, gb, config.lr, config.clip_norm)
            losses.append(loss * len(idx))
        history.append(float(sum(losses) / len(states)))
        if not np.isfinite(history[-1]):
            raise NumericalError("behavior cloning loss became non-finite")
    return out, history


def greedy(params: NetworkParams, x) -> np.ndarray:
    """Argmax action per row; ties go to the lowest action index."""
    return np.argmax(forward(params, np.atleast_2d(x)), axis=1)


def agreement(params: NetworkParams, states, expert_actions) -> float:
    states = np.asarray(states, dtype=float)
    if len(states) == 0:
        return float("nan")
    return float(np.mean(greedy(params, states) == np.asarray(expert_actions)))


def save_network(params: NetworkParams, path: str | Path) -> Path:
    return _io.write_document(path, NetworkParams.SCHEMA, NetworkParams.VERSION, params.to_dict())


def load_network(path: str | Path) -> NetworkParams:
    return NetworkParams.from_dict(_io.read_document(path, NetworkParams.SCHEMA, NetworkParams.VERSION))


def bc_config_dict(config: BcConfig) -> dict:
    return asdict(config)
