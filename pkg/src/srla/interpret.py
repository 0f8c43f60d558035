"""Which sensors characterize each hidden state.

A multinomial logistic regression is fit from standardized sensors to the
decoded states; its signed coefficients serve as per-state relevances.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import log_softmax

from .data import RunToFailureDataset
from .decoding import viterbi_paths
from .errors import ConfigError, DatasetError
from .iohmm import IohmmParams

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    l2: float = 1e-3
    epochs: int = 5000
    lr: float | None = None
    tol: float = 1e-8
    seed: int = 0


@dataclass
class StateClassifier:
    classes: np.ndarray
    feature_names: tuple[str, ...]
    offset: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    intercept: np.ndarray
    loss_trace: list[float] = field(default_factory=list)
    accuracy: float = float("nan")

    @property
    def raw_coef(self) -> np.ndarray:
        """Coefficients with respect to the unstandardized inputs."""
        return self.coef / self.scale

    def standardize(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.offset) / self.scale

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.standardize(X) @ self.coef.T + self.intercept

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return np.exp(log_softmax(self.logits(X), axis=1))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(X), axis=1)]


def loss_and_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray, Y: np.ndarray, l2: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus ``l2 / 2 * ||W||^2`` and its gradients.

    ``W`` is [C, d], ``b`` is [C], ``Y`` is one-hot [n, C].
    """
    n = X.shape[0]
    logp = log_softmax(X @ W.T + b, axis=1)
    loss = -float((Y * logp).sum()) / n + 0.5 * l2 * float((W * W).sum())
    diff = (np.exp(logp) - Y) / n
    return loss, diff.T @ X + l2 * W, diff.sum(0)


def _lipschitz_step(X: np.ndarray, l2: float) -> float:
    # the softmax cross-entropy Hessian is bounded by 0.5 * (Xa^T Xa / n) (x) I
    Xa = np.hstack([X, np.ones((X.shape[0], 1))])
    lam = float(np.linalg.eigvalsh(Xa.T @ Xa / X.shape[0])[-1])
    return 1.0 / (0.5 * lam + l2)


def fit_state_classifier(
    X: np.ndarray,
    targets: Sequence[int],
    config: ClassifierConfig | None = None,
    feature_names: Sequence[str] | None = None,
) -> StateClassifier:
    """Full-batch gradient descent on standardized inputs.

    Stops when the loss changes by less than ``config.tol`` or after
    ``config.epochs`` epochs. The default step size is the inverse of a bound
    on the loss curvature, which makes the loss non-increasing.
    """
    config = config or ClassifierConfig()
    X = np.asarray(X, dtype=float)
    targets = np.asarray(targets)
    if X.ndim != 2 or len(X) != len(targets):
        raise ConfigError(f"X has {len(X)} rows but there are {len(targets)} targets")
    classes, y = np.unique(targets, return_inverse=True)
    if len(classes) < 2:
        raise ConfigError("at least two distinct classes are required")
    names = tuple(feature_names) if feature_names is not None else tuple(f"feature {j + 1}" for j in range(X.shape[1]))
    if len(names) != X.shape[1]:
        raise ConfigError("feature_names length differs from the number of columns")
    offset = X.mean(0)
    scale = X.std(0)
    scale = np.where(scale > 0, scale, 1.0)
    Xs = (X - offset) / scale
    Y = np.eye(len(classes))[y]
    rng = np.random.default_rng(config.seed)
    W = 0.01 * rng.standard_normal((len(classes), X.shape[1]))
    b = np.zeros(len(classes))
    lr = config.lr if config.lr is not None else _lipschitz_step(Xs, config.l2)
    loss, gW, gb = loss_and_grad(W, b, Xs, Y, config.l2)
    trace = [loss]
    for _ in range(config.epochs):
        W = W - lr * gW
        b = b - lr * gb
        loss, gW, gb = loss_and_grad(W, b, Xs, Y, config.l2)
        trace.append(loss)
        if abs(trace[-2] - loss) < config.tol:
            break
    clf = StateClassifier(classes, names, offset, scale, W, b, trace)
    clf.accuracy = float(np.mean(clf.predict(X) == targets))
    return clf


def feature_importance(clf: StateClassifier, state: int, top_k: int | None = None) -> list[tuple[str, float]]:
    """Features ranked by absolute coefficient for ``state``; signs preserved."""
    hits = np.flatnonzero(clf.classes == state)
    if len(hits) == 0:
        raise ConfigError(f"state {state} was not among the trained classes {clf.classes.tolist()}")
    return _rank(clf.feature_names, clf.coef[hits[0]], top_k)


def _rank(names: Sequence[str], coef: np.ndarray, top_k: int | None) -> list[tuple[str, float]]:
    order = np.argsort(-np.abs(coef), kind="stable")
    if top_k is not None:
        order = order[:top_k]
    return [(names[j], float(coef[j])) for j in order]


@dataclass
class ImportanceReport:
    classes: list[int]
    rankings: dict[int, list[tuple[str, float]]]
    accuracy: float

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "accuracy": self.accuracy,
            "rankings": {str(s): [{"feature": f, "coefficient": c} for f, c in r] for s, r in self.rankings.items()},
        }


def importance_report(clf: StateClassifier, top_k: int | None = None) -> ImportanceReport:
    return ImportanceReport([int(c) for c in clf.classes],
                            {int(c): feature_importance(clf, int(c), top_k) for c in clf.classes},
                            clf.accuracy)


@dataclass(frozen=True)
class SensorDescription:
    symbol: str
    description: str


def load_sensor_descriptions(path: str | Path | None) -> dict[str, SensorDescription]:
    """Read ``feature,symbol,description`` rows; a missing file yields an empty table."""
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        log.warning("sensor description file %s not found; rankings will carry no descriptions", path)
        return {}
    out = {}
    with path.open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() in ("feature", "name"):
                continue
            row = row + ["", ""]
            out[row[0].strip()] = SensorDescription(row[1].strip(), row[2].strip())
    return out


@dataclass
class FailureModeRow:
    failure_state: int
    rank: int
    feature: str
    score: float
    symbol: str = ""
    description: str = ""


def failure_mode_report(
    params: IohmmParams,
    data: RunToFailureDataset,
    failure_states: Iterable[int],
    descriptions: dict[str, SensorDescription] | None = None,
    top_k: int | None = None,
    config: ClassifierConfig | None = None,
) -> list[FailureModeRow]:
    """Rank sensors separating each failure state from every other cycle.

    For each failure state a two-class model (that state against the rest) is
    fit and features are ranked by the difference of the two class
    coefficients.
    """
    descriptions = descriptions or {}
    X = data.stacked_sensors()
    states = np.concatenate(viterbi_paths(params, data))
    rows: list[FailureModeRow] = []
    present = [int(f) for f in sorted(failure_states) if (states == f).any()]
    if not present:
        raise DatasetError("none of the failure states occurs in the decoded data")
    for f in present:
        target = (states == f).astype(int)
        if target.all():
            raise DatasetError(f"every cycle decodes to failure state {f}; nothing to contrast with")
        clf = fit_state_classifier(X, target, config, data.sensor_names)
        score = clf.coef[1] - clf.coef[0]
        for rank, (name, value) in enumerate(_rank(clf.feature_names, score, top_k), start=1):
            d = descriptions.get(name, SensorDescription("", ""))
            rows.append(FailureModeRow(f, rank, name, value, d.symbol, d.description))
    return rows


def write_failure_mode_csv(path: str | Path, rows: Sequence[FailureModeRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["failure_state", "rank", "feature", "score", "symbol", "description"])
        for r in rows:
            w.writerow([r.failure_state, r.rank, r.feature, repr(r.score), r.symbol, r.description])
    return path
