"""From decoded states to maintenance events: failure states, the gated set X_s, condition bands."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from . import _io
from .data import RunToFailureDataset
from .errors import ConfigError, InvariantError
from .iohmm import IohmmParams, viterbi

EDGE_THRESHOLD = 1e-3
CONDITION_LABELS = ("normal", "potential_fault", "failure_progression", "fault_point", "failure")
# upper edges of the first four bands on normalized life position (t - 1) / (T - 1)
DEFAULT_BAND_EDGES = (0.5, 0.75, 0.9, 0.99)


@dataclass(frozen=True)
class ConditionBand:
    label: str
    states: tuple[int, ...]
    median_positions: tuple[float, ...]


@dataclass
class StateAnnotation:
    failure_states: frozenset[int]
    specialized_states: frozenset[int]
    condition_map: list[ConditionBand] = field(default_factory=list)
    p_fail_threshold: float = 0.5
    diagnostics: list[str] = field(default_factory=list)

    SCHEMA = "srla/state-annotation"
    VERSION = 1

    def __post_init__(self) -> None:
        self.failure_states = frozenset(int(s) for s in self.failure_states)
        self.specialized_states = frozenset(int(s) for s in self.specialized_states)
        if not self.failure_states <= self.specialized_states:
            raise InvariantError("failure states must be contained in the specialized set")
        if not 0.0 <= self.p_fail_threshold <= 1.0:
            raise InvariantError("p_fail_threshold must lie in [0, 1]")
        seen: set[int] = set()
        for band in self.condition_map:
            if seen & set(band.states):
                raise InvariantError("condition bands overlap")
            seen |= set(band.states)

    def to_dict(self) -> dict:
        return {
            "failure_states": sorted(self.failure_states),
            "specialized_states": sorted(self.specialized_states),
            "p_fail_threshold": self.p_fail_threshold,
            "condition_map": [
                {"label": b.label, "states": list(b.states), "median_positions": list(b.median_positions)}
                for b in self.condition_map
            ],
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StateAnnotation":
        bands = [ConditionBand(b["label"], tuple(b["states"]), tuple(b["median_positions"])) for b in d.get("condition_map", [])]
        return cls(frozenset(d["failure_states"]), frozenset(d["specialized_states"]), bands,
                   float(d.get("p_fail_threshold", 0.5)), list(d.get("diagnostics", [])))

    def save(self, path: str | Path) -> Path:
        return _io.write_document(path, self.SCHEMA, self.VERSION, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "StateAnnotation":
        return cls.from_dict(_io.read_document(path, cls.SCHEMA, cls.VERSION))

    def label_of(self, state: int) -> str | None:
        for band in self.condition_map:
            if state in band.states:
                return band.label
        return None


def unit_inputs(params: IohmmParams, unit) -> np.ndarray:
    """Input symbols a model expects for ``unit``: its own symbols, or all zeros for a plain HMM."""
    if params.n_inputs == 1:
        return np.zeros(unit.length, dtype=np.int64)
    if unit.input_symbols is None:
        raise ConfigError(f"unit {unit.unit_id} has no input symbols but the model has {params.n_inputs} inputs")
    return np.asarray(unit.input_symbols, dtype=np.int64)


def viterbi_paths(params: IohmmParams, data: RunToFailureDataset) -> list[np.ndarray]:
    return [viterbi(params, unit_inputs(params, u), u.sensors).states for u in data.units]


def decode_failure_states(params: IohmmParams, train: RunToFailureDataset,
                          paths: Sequence[np.ndarray] | None = None) -> frozenset[int]:
    """States occupied at the last cycle of each unit's Viterbi path."""
    paths = viterbi_paths(params, train) if paths is None else paths
    return frozenset(int(p[-1]) for p in paths)


def _reach_within(params: IohmmParams, targets: Iterable[int], radius: int, threshold: float) -> set[int]:
    edges = (params.A > threshold).any(axis=0)
    reached = set(int(s) for s in targets)
    frontier = set(reached)
    for _ in range(radius):
        new = {int(i) for i in np.flatnonzero(edges[:, sorted(frontier)].any(axis=1))} - reached
        if not new:
            break
        reached |= new
        frontier = new
    return reached


def build_specialized_set(
    params: IohmmParams,
    failure_states: Iterable[int],
    value_fn: np.ndarray | None = None,
    mode: Literal["transition_radius", "value_quantile"] = "transition_radius",
    radius: int = 2,
    quantile: float = 0.25,
    edge_threshold: float = EDGE_THRESHOLD,
) -> frozenset[int]:
    """States in which the learned policy is allowed to act.

    ``transition_radius`` keeps every state that can reach a failure state in at
    most ``radius`` transitions whose probability exceeds ``edge_threshold``
    under some input. ``value_quantile`` keeps the ``floor(quantile * n)``
    states (at least one) with the lowest mean value among the ``n`` states
    that have a finite entry in ``value_fn``, plus the failure states.
    """
    failure_states = frozenset(int(s) for s in failure_states)
    if not failure_states:
        raise ConfigError("at least one failure state is required")
    if mode == "transition_radius":
        if radius < 0:
            raise ConfigError("radius must be non-negative")
        return frozenset(_reach_within(params, failure_states, radius, edge_threshold))
    if mode == "value_quantile":
        if value_fn is None:
            raise ConfigError("value_quantile mode needs per-state value estimates")
        if not 0.0 < quantile <= 1.0:
            raise ConfigError("quantile must lie in (0, 1]")
        v = np.asarray(value_fn, dtype=float)
        valid = np.flatnonzero(np.isfinite(v))
        n_keep = max(1, int(np.floor(quantile * len(valid))))
        # stable sort: equal values keep the lower state index first
        order = valid[np.argsort(v[valid], kind="stable")]
        return frozenset({int(s) for s in order[:n_keep]} | failure_states)
    raise ConfigError(f"unknown specialized-set mode {mode!r}")


def map_states_to_conditions(
    paths: Sequence[np.ndarray],
    positions: Sequence[np.ndarray] | None = None,
    band_edges: Sequence[float] = DEFAULT_BAND_EDGES,
    labels: Sequence[str] = CONDITION_LABELS,
) -> tuple[list[ConditionBand], list[str]]:
    """Group states into condition bands by the median life position at which they occur.

    ``positions`` gives a per-cycle health coordinate in [0, 1] for each path
    (ground truth when available); by default it is the normalized cycle
    position ``(t - 1) / (T - 1)``. Returns the bands and a list of
    diagnostics, non-empty when the ordering by median position does not
    follow state index order.
    """
    if len(band_edges) != len(labels) - 1 or np.any(np.diff(band_edges) <= 0):
        raise ConfigError("band_edges must be increasing with one fewer entry than labels")
    if positions is None:
        positions = [np.linspace(0.0, 1.0, len(p)) if len(p) > 1 else np.ones(1) for p in paths]
    states = np.concatenate([np.asarray(p) for p in paths])
    pos = np.concatenate([np.asarray(q, dtype=float) for q in positions])
    if len(states) != len(pos):
        raise ConfigError("positions must match the paths cycle for cycle")
    occurring = np.unique(states)
    medians = np.array([np.median(pos[states == s]) for s in occurring])
    order = np.argsort(medians, kind="stable")
    ordered_states, ordered_medians = occurring[order], medians[order]
    band_of = np.searchsorted(np.asarray(band_edges), ordered_medians, side="left")
    bands = []
    for b, label in enumerate(labels):
        sel = band_of == b
        if sel.any():
            bands.append(ConditionBand(label, tuple(int(s) for s in ordered_states[sel]),
                                       tuple(float(m) for m in ordered_medians[sel])))
    diagnostics = []
    if np.any(np.diff(ordered_states) < 0):
        diagnostics.append("state indices are not monotone in median life position: "
                           + ",".join(str(int(s)) for s in ordered_states))
    return bands, diagnostics


def posterior_failure_mass(gamma_row: np.ndarray, failure_states: Iterable[int]) -> float:
    """Posterior probability of currently being in a failure state."""
    idx = sorted(int(s) for s in failure_states)
    if not idx:
        return 0.0
    return float(min(1.0, max(0.0, np.asarray(gamma_row, dtype=float)[idx].sum())))


def annotate(
    params: IohmmParams,
    train: RunToFailureDataset,
    mode: Literal["transition_radius", "value_quantile"] = "transition_radius",
    radius: int = 2,
    quantile: float = 0.25,
    value_fn: np.ndarray | None = None,
    p_fail_threshold: float = 0.5,
    band_edges: Sequence[float] = DEFAULT_BAND_EDGES,
) -> StateAnnotation:
    """Decode ``train`` once and build the full annotation."""
    paths = viterbi_paths(params, train)
    failure = decode_failure_states(params, train, paths)
    xs = build_specialized_set(params, failure, value_fn, mode, radius, quantile)
    bands, diag = map_states_to_conditions(paths, band_edges=band_edges)
    return StateAnnotation(failure, xs, bands, p_fail_threshold, diag)


def state_assignment_rows(params: IohmmParams, data: RunToFailureDataset,
                          annotation: StateAnnotation | None = None) -> list[tuple[int, int, int, str]]:
    """(unit, cycle, viterbi_state, condition_label) for every cycle."""
    rows = []
    for unit, path in zip(data.units, viterbi_paths(params, data)):
        for t, s in enumerate(path, start=1):
            label = annotation.label_of(int(s)) if annotation else None
            rows.append((unit.unit_id, t, int(s), label or ""))
    return rows
