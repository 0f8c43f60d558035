"""Run-to-failure datasets: ingest, normalization, operating-condition alphabets,
synthetic degradation data and unit-level splits.

A *unit* is one equipment instance observed from cycle 1 until the cycle at
which it failed. Cycle ``t`` of a unit is stored at row ``t - 1``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import _io
from .errors import ConfigError, DatasetError, DatasetNotFound, InvariantError, LoadError

log = logging.getLogger(__name__)

CMAPSS_N_OPS = 3
CMAPSS_N_SENSORS = 21
CMAPSS_COLUMNS = 2 + CMAPSS_N_OPS + CMAPSS_N_SENSORS

OP_PREFIX = "op_"
SENSOR_PREFIX = "s_"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class UnitTrajectory:
    unit_id: int
    sensors: np.ndarray
    op_settings: np.ndarray
    input_symbols: np.ndarray | None = None

    def __post_init__(self) -> None:
        sensors = np.asarray(self.sensors, dtype=float)
        ops = np.asarray(self.op_settings, dtype=float)
        if sensors.ndim != 2 or ops.ndim != 2:
            raise InvariantError(f"unit {self.unit_id}: sensors and op_settings must be 2-D")
        if sensors.shape[0] != ops.shape[0]:
            raise InvariantError(
                f"unit {self.unit_id}: {sensors.shape[0]} sensor rows vs {ops.shape[0]} op-setting rows"
            )
        object.__setattr__(self, "sensors", _readonly(sensors))
        object.__setattr__(self, "op_settings", _readonly(ops))
        if self.input_symbols is not None:
            sym = np.asarray(self.input_symbols)
            if sym.shape != (sensors.shape[0],):
                raise InvariantError(f"unit {self.unit_id}: input_symbols length mismatch")
            if sym.size and sym.min() < 0:
                raise InvariantError(f"unit {self.unit_id}: negative input symbol")
            object.__setattr__(self, "input_symbols", _readonly(sym.astype(np.int64)))

    @property
    def length(self) -> int:
        """Failure cycle T_j (the number of recorded cycles)."""
        return self.sensors.shape[0]

    @property
    def cycles(self) -> np.ndarray:
        return np.arange(1, self.length + 1)

    def symbols(self) -> np.ndarray:
        if self.input_symbols is None:
            raise DatasetError(f"unit {self.unit_id} has no input symbols; discretize operating conditions first")
        return self.input_symbols


@dataclass(frozen=True)
class RunToFailureDataset:
    units: tuple[UnitTrajectory, ...]
    sensor_names: tuple[str, ...]
    op_setting_names: tuple[str, ...]
    n_inputs: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "units", tuple(self.units))
        object.__setattr__(self, "sensor_names", tuple(self.sensor_names))
        object.__setattr__(self, "op_setting_names", tuple(self.op_setting_names))
        d_y, d_u = len(self.sensor_names), len(self.op_setting_names)
        seen = set()
        for u in self.units:
            if u.unit_id in seen:
                raise InvariantError(f"duplicate unit id {u.unit_id}")
            seen.add(u.unit_id)
            if u.sensors.shape[1] != d_y or u.op_settings.shape[1] != d_u:
                raise InvariantError(f"unit {u.unit_id}: dimensionality differs from the dataset header")
            if u.length < 2:
                raise InvariantError(f"unit {u.unit_id}: a run-to-failure unit needs at least 2 cycles")
            if self.n_inputs is not None and u.input_symbols is not None and u.input_symbols.max() >= self.n_inputs:
                raise InvariantError(f"unit {u.unit_id}: input symbol outside [0, {self.n_inputs})")

    def __len__(self) -> int:
        return len(self.units)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([u.length for u in self.units], dtype=np.int64)

    @property
    def total_cycles(self) -> int:
        return int(self.lengths.sum())

    def unit(self, unit_id: int) -> UnitTrajectory:
        for u in self.units:
            if u.unit_id == unit_id:
                return u
        raise KeyError(unit_id)

    def subset(self, unit_ids: Sequence[int]) -> "RunToFailureDataset":
        wanted = set(unit_ids)
        return replace(self, units=tuple(u for u in self.units if u.unit_id in wanted))

    def stacked_sensors(self) -> np.ndarray:
        return np.vstack([u.sensors for u in self.units])

    def stacked_ops(self) -> np.ndarray:
        return np.vstack([u.op_settings for u in self.units])

    def select_sensors(self, names: Sequence[str]) -> "RunToFailureDataset":
        """Keep only the named sensors, in the given order."""
        missing = [n for n in names if n not in self.sensor_names]
        if missing:
            raise ConfigError(f"unknown sensors: {missing}")
        idx = [self.sensor_names.index(n) for n in names]
        units = tuple(replace(u, sensors=u.sensors[:, idx]) for u in self.units)
        return replace(self, units=units, sensor_names=tuple(names))

    def has_symbols(self) -> bool:
        return self.n_inputs is not None and all(u.input_symbols is not None for u in self.units)


# ---------------------------------------------------------------------------
# ingest


def _build_units(rows: dict[int, list[tuple[int, int, list[float]]]], d_u: int) -> list[UnitTrajectory]:
    units = []
    for unit_id in sorted(rows):
        recs = sorted(rows[unit_id], key=lambda r: r[0])
        cycles = [c for c, _, _ in recs]
        for k, c in enumerate(cycles, start=1):
            if c != k:
                line_no = recs[k - 1][1]
                raise LoadError(f"unit {unit_id}, row {line_no}: expected cycle {k}, found {c} (gap or duplicate)")
        vals = np.array([v for _, _, v in recs], dtype=float)
        units.append(UnitTrajectory(unit_id, sensors=vals[:, d_u:], op_settings=vals[:, :d_u]))
    return units


def _parse_float(tok: str, unit: str, line_no: int, col: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise LoadError(f"unit {unit}, row {line_no}: non-numeric value {tok!r} in column {col}") from None


def _parse_int(tok: str, unit: str, line_no: int, col: str) -> int:
    v = _parse_float(tok, unit, line_no, col)
    if v != int(v):
        raise LoadError(f"unit {unit}, row {line_no}: column {col} must be an integer, got {tok!r}")
    return int(v)


def _load_cmapss(path: Path) -> RunToFailureDataset:
    rows: dict[int, list] = {}
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            toks = line.split()
            if not toks:
                continue
            unit_tok = toks[0]
            if len(toks) != CMAPSS_COLUMNS:
                raise LoadError(
                    f"unit {unit_tok}, row {line_no}: expected {CMAPSS_COLUMNS} columns, found {len(toks)}"
                )
            unit = _parse_int(unit_tok, unit_tok, line_no, "unit")
            cycle = _parse_int(toks[1], unit_tok, line_no, "cycle")
            vals = [_parse_float(t, unit_tok, line_no, str(j + 3)) for j, t in enumerate(toks[2:])]
            rows.setdefault(unit, []).append((cycle, line_no, vals))
    units = _build_units(rows, CMAPSS_N_OPS)
    return RunToFailureDataset(
        tuple(units),
        tuple(f"{SENSOR_PREFIX}{i}" for i in range(1, CMAPSS_N_SENSORS + 1)),
        tuple(f"{OP_PREFIX}{i}" for i in range(1, CMAPSS_N_OPS + 1)),
    )


def _load_csv(path: Path) -> RunToFailureDataset:
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise LoadError(f"{path}: empty file") from None
        if "unit" not in header or "cycle" not in header:
            raise LoadError(f"{path}: header must contain 'unit' and 'cycle' columns")
        op_cols = [i for i, h in enumerate(header) if h.startswith(OP_PREFIX)]
        s_cols = [i for i, h in enumerate(header) if h.startswith(SENSOR_PREFIX)]
        iu, ic = header.index("unit"), header.index("cycle")
        rows: dict[int, list] = {}
        for line_no, toks in enumerate(reader, start=2):
            if not toks or all(not t.strip() for t in toks):
                continue
            unit_tok = toks[iu] if iu < len(toks) else "?"
            if len(toks) != len(header):
                raise LoadError(f"unit {unit_tok}, row {line_no}: expected {len(header)} columns, found {len(toks)}")
            unit = _parse_int(toks[iu], unit_tok, line_no, "unit")
            cycle = _parse_int(toks[ic], unit_tok, line_no, "cycle")
            vals = [_parse_float(toks[i], unit_tok, line_no, header[i]) for i in op_cols + s_cols]
            rows.setdefault(unit, []).append((cycle, line_no, vals))
    units = _build_units(rows, len(op_cols))
    return RunToFailureDataset(tuple(units), tuple(header[i] for i in s_cols), tuple(header[i] for i in op_cols))


def load_run_to_failure(path: str | Path, format: Literal["cmapss_txt", "csv"] | None = None) -> RunToFailureDataset:
    """Read a run-to-failure file.

    ``cmapss_txt`` is the whitespace-separated 26-column C-MAPSS layout
    (unit, cycle, 3 operating settings, 21 sensors). ``csv`` needs a header
    with ``unit`` and ``cycle`` columns; columns prefixed ``op_`` are operating
    settings, ``s_`` sensors, anything else is ignored. The format is inferred
    from the suffix when omitted.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetNotFound(f"dataset file not found: {path}")
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "cmapss_txt"
    if format == "cmapss_txt":
        data = _load_cmapss(path)
    elif format == "csv":
        data = _load_csv(path)
    else:
        raise ConfigError(f"unknown dataset format {format!r}")
    if not data.units:
        raise LoadError(f"{path}: no rows")
    return data


def save_csv(data: RunToFailureDataset, path: str | Path) -> Path:
    """Write the portable CSV form; values are written with ``repr`` so they reload exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ops = [n if n.startswith(OP_PREFIX) else OP_PREFIX + n for n in data.op_setting_names]
    sens = [n if n.startswith(SENSOR_PREFIX) else SENSOR_PREFIX + n for n in data.sensor_names]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "cycle", *ops, *sens])
        for u in data.units:
            for t in range(u.length):
                w.writerow([u.unit_id, t + 1, *map(repr, u.op_settings[t].tolist()), *map(repr, u.sensors[t].tolist())])
    return path


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormalizationSpec:
    mode: Literal["minmax", "zscore"]
    feature_set: Literal["sensors", "sensors_and_ops"]
    sensor_offset: np.ndarray
    sensor_scale: np.ndarray
    op_offset: np.ndarray | None = None
    op_scale: np.ndarray | None = None
    warnings: tuple[str, ...] = ()

    SCHEMA = "srla/normalizer"
    VERSION = 1

    @staticmethod
    def _apply(x: np.ndarray, offset: np.ndarray, scale: np.ndarray) -> np.ndarray:
        dead = scale == 0
        out = (x - offset) / np.where(dead, 1.0, scale)
        out[:, dead] = 0.0
        return out

    def transform_sensors(self, x: np.ndarray) -> np.ndarray:
        return self._apply(np.asarray(x, dtype=float), self.sensor_offset, self.sensor_scale)

    def transform_ops(self, x: np.ndarray) -> np.ndarray:
        if self.op_offset is None:
            return np.asarray(x, dtype=float).copy()
        return self._apply(np.asarray(x, dtype=float), self.op_offset, self.op_scale)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "feature_set": self.feature_set,
            "sensor_offset": self.sensor_offset,
            "sensor_scale": self.sensor_scale,
            "op_offset": self.op_offset,
            "op_scale": self.op_scale,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)  # noqa: E731
        return cls(d["mode"], d["feature_set"], arr(d["sensor_offset"]), arr(d["sensor_scale"]),
                   arr(d.get("op_offset")), arr(d.get("op_scale")), tuple(d.get("warnings", ())))

    def save(self, path: str | Path) -> Path:
        return _io.write_document(path, self.SCHEMA, self.VERSION, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "NormalizationSpec":
        return cls.from_dict(_io.read_document(path, cls.SCHEMA, cls.VERSION))


def _column_stats(x: np.ndarray, mode: str, names: Sequence[str], warnings: list[str]) -> tuple[np.ndarray, np.ndarray]:
    if mode == "minmax":
        offset = x.min(axis=0)
        scale = x.max(axis=0) - offset
    elif mode == "zscore":
        offset = x.mean(axis=0)
        scale = x.std(axis=0)
    else:
        raise ConfigError(f"unknown normalization mode {mode!r}")
    for j in np.flatnonzero(scale == 0):
        msg = f"feature {names[j]} is constant on the training split; mapped to 0"
        log.warning(msg)
        warnings.append(msg)
    return offset, scale


def fit_normalizer(
    data: RunToFailureDataset,
    mode: Literal["minmax", "zscore"] = "minmax",
    feature_set: Literal["sensors", "sensors_and_ops"] = "sensors",
) -> NormalizationSpec:
    """Fit per-feature statistics on ``data`` (the training split)."""
    if not data.units:
        raise DatasetError("cannot fit a normalizer on an empty dataset")
    if feature_set not in ("sensors", "sensors_and_ops"):
        raise ConfigError(f"unknown feature_set {feature_set!r}")
    warnings: list[str] = []
    s_off, s_scale = _column_stats(data.stacked_sensors(), mode, data.sensor_names, warnings)
    o_off = o_scale = None
    if feature_set == "sensors_and_ops":
        o_off, o_scale = _column_stats(data.stacked_ops(), mode, data.op_setting_names, warnings)
    return NormalizationSpec(mode, feature_set, s_off, s_scale, o_off, o_scale, tuple(warnings))


def apply_normalizer(spec: NormalizationSpec, data: RunToFailureDataset) -> RunToFailureDataset:
    if len(spec.sensor_offset) != len(data.sensor_names):
        raise DatasetError("normalizer was fitted on a different sensor set")
    units = tuple(
        replace(u, sensors=spec.transform_sensors(u.sensors), op_settings=spec.transform_ops(u.op_settings))
        for u in data.units
    )
    return replace(data, units=units)


# ---------------------------------------------------------------------------
# operating-condition alphabet


def _relabel_by_centroid(labels: np.ndarray, points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    cents = np.array([points[labels == c].mean(axis=0) for c in range(k)])
    order = np.lexsort(cents.T[::-1])
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    return remap[labels], cents[order]


def discretize_operating_conditions(
    data: RunToFailureDataset, k: int | None = None, tol: float = 1e-3, seed: int = 0
) -> tuple[RunToFailureDataset, np.ndarray]:
    """Assign every cycle a discrete input symbol from its operating settings.

    Without ``k``, rows closer than ``tol`` (max-abs distance) are linked and
    each connected group is one symbol, so noisy copies of a discrete regime
    collapse together. With ``k``, seeded k-means is used instead. Symbols are
    ordered by their centroid (lexicographically), so the result is a pure
    function of the inputs.

    Returns the dataset with ``input_symbols`` filled and the centroid
    alphabet, shape ``(K_u, d_u)``.
    """
    if not data.units:
        raise DatasetError("empty dataset")
    ops = data.stacked_ops()
    if ops.shape[1] == 0:
        # no operating settings recorded: a single regime
        labels = np.zeros(len(ops), dtype=np.int64)
        alphabet = np.zeros((1, 0))
    else:
        uniq, inverse = np.unique(ops, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        if k is None:
            pairs = cKDTree(uniq).query_pairs(r=tol, p=np.inf, output_type="ndarray")
            n = len(uniq)
            graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
            n_groups, group = connected_components(graph, directed=False)
            labels, alphabet = _relabel_by_centroid(group[inverse], ops, n_groups)
        else:
            if k < 1 or k > len(uniq):
                raise ConfigError(f"k={k} but only {len(uniq)} distinct operating-setting rows")
            _, lab = kmeans2(uniq, k, minit="++", seed=np.random.default_rng(seed))
            lab = lab[inverse]
            present = np.unique(lab)
            dense = np.searchsorted(present, lab)
            labels, alphabet = _relabel_by_centroid(dense, ops, len(present))
    return _with_symbols(data, labels, len(alphabet)), alphabet


def _with_symbols(data: RunToFailureDataset, labels: np.ndarray, n_inputs: int) -> RunToFailureDataset:
    units, start = [], 0
    for u in data.units:
        units.append(replace(u, input_symbols=labels[start:start + u.length]))
        start += u.length
    return replace(data, units=tuple(units), n_inputs=n_inputs)


def assign_input_symbols(data: RunToFailureDataset, alphabet: np.ndarray) -> RunToFailureDataset:
    """Map operating settings to the nearest centroid of a previously fitted alphabet."""
    alphabet = np.asarray(alphabet, dtype=float)
    ops = data.stacked_ops()
    if alphabet.shape[1] != ops.shape[1]:
        raise DatasetError("alphabet dimensionality differs from the dataset's operating settings")
    if ops.shape[1] == 0:
        labels = np.zeros(len(ops), dtype=np.int64)
    else:
        labels = np.argmin(((ops[:, None, :] - alphabet[None]) ** 2).sum(-1), axis=1)
    return _with_symbols(data, labels, len(alphabet))


# ---------------------------------------------------------------------------
# synthetic degradation data


@dataclass
class SyntheticConfig:
    """Generative IOHMM used as ground truth.

    ``transitions[u, i, j]`` is P(x_t = j | x_{t-1} = i, u_t = u); emissions are
    Gaussian with ``means[i, u]`` and ``stds[i, u]``. Units start from ``pi`` and
    stop at the first cycle spent in ``failure_state``, which must be absorbing.
    """

    transitions: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    n_units: int = 50
    failure_state: int | None = None
    pi: np.ndarray | None = None
    input_probs: np.ndarray | None = None
    op_centroids: np.ndarray | None = None
    max_horizon: int = 10_000

    SCHEMA = "srla/synthetic-config"
    VERSION = 1

    def __post_init__(self) -> None:
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.stds = np.asarray(self.stds, dtype=float)
        k_u, n, n2 = self.transitions.shape
        if n != n2:
            raise ConfigError("transition matrices must be square")
        if self.means.shape[:2] != (n, k_u) or self.stds.shape != self.means.shape:
            raise ConfigError("means/stds must have shape (n_states, n_inputs, d_y)")
        if not np.allclose(self.transitions.sum(-1), 1.0, atol=1e-9) or (self.transitions < 0).any():
            raise ConfigError("transition rows must be probability vectors")
        if self.failure_state is None:
            self.failure_state = n - 1
        f = self.failure_state
        if not 0 <= f < n:
            raise ConfigError("failure_state out of range")
        if not np.all(self.transitions[:, f, f] == 1.0):
            raise ConfigError(f"failure state {f} must be absorbing (outgoing mass must be 0 under every input)")
        self.pi = np.eye(n)[0] if self.pi is None else np.asarray(self.pi, dtype=float)
        self.input_probs = np.full(k_u, 1.0 / k_u) if self.input_probs is None else np.asarray(self.input_probs, dtype=float)
        if self.op_centroids is None:
            self.op_centroids = np.arange(k_u, dtype=float)[:, None] * 10.0
        self.op_centroids = np.asarray(self.op_centroids, dtype=float)
        if self.pi.shape != (n,) or not np.isclose(self.pi.sum(), 1.0):
            raise ConfigError("pi must be a probability vector over states")
        if self.pi[f] > 0:
            raise ConfigError("units cannot start in the failure state")
        if self.input_probs.shape != (k_u,) or not np.isclose(self.input_probs.sum(), 1.0):
            raise ConfigError("input_probs must be a probability vector over inputs")
        if self.op_centroids.shape[0] != k_u:
            raise ConfigError("op_centroids needs one row per input symbol")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.transitions.shape[0]

    @classmethod
    def left_to_right(
        cls,
        n_states: int,
        forward: float | Sequence[float] | np.ndarray,
        d_y: int = 3,
        separation: float = 1.0,
        noise: float = 0.15,
        n_inputs: int = 1,
        input_offset: float = 2.0,
        n_units: int = 50,
        **kwargs,
    ) -> "SyntheticConfig":
        """A degradation chain 0 -> 1 -> ... -> n_states-1 (failure).

        ``forward`` is the per-cycle probability of moving to the next state; a
        scalar applies to every transient state, an array of shape
        ``(n_states - 1,)`` per state, or ``(n_inputs, n_states - 1)`` per input.
        State means march along a fixed direction by ``separation`` per state and
        each input symbol shifts all sensors by ``input_offset``.
        """
        q = np.broadcast_to(np.asarray(forward, dtype=float), (n_inputs, n_states - 1))
        A = np.zeros((n_inputs, n_states, n_states))
        for u in range(n_inputs):
            for i in range(n_states - 1):
                A[u, i, i] = 1.0 - q[u, i]
                A[u, i, i + 1] = q[u, i]
            A[u, -1, -1] = 1.0
        direction = np.array([(-1.0) ** j * (1.0 - 0.15 * j) for j in range(d_y)])
        means = np.zeros((n_states, n_inputs, d_y))
        for i in range(n_states):
            for u in range(n_inputs):
                means[i, u] = i * separation * direction + u * input_offset
        stds = np.full_like(means, noise)
        return cls(A, means, stds, n_units=n_units, **kwargs)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("transitions", "means", "stds", "n_units", "failure_state", "pi", "input_probs", "op_centroids", "max_horizon")}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        keys = ("transitions", "means", "stds", "n_units", "failure_state", "pi", "input_probs", "op_centroids", "max_horizon")
        return cls(**{k: d[k] for k in keys if k in d})

    def save(self, path: str | Path) -> Path:
        return _io.write_document(path, self.SCHEMA, self.VERSION, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticConfig":
        return cls.from_dict(_io.read_document(path, cls.SCHEMA, cls.VERSION))


def _draw(cum: np.ndarray, r: float) -> int:
    # first index whose cumulative mass exceeds r; guards against rounding at the top
    return min(int(np.searchsorted(cum, r, side="right")), len(cum) - 1)


def generate_synthetic(config: SyntheticConfig, seed: int) -> tuple[RunToFailureDataset, list[np.ndarray]]:
    """Simulate ``config.n_units`` run-to-failure units.

    Returns the dataset (input symbols filled) and the hidden state sequence of
    every unit.
    """
    rng = np.random.default_rng(seed)
    cum_a = np.cumsum(config.transitions, axis=-1)
    cum_pi = np.cumsum(config.pi)
    cum_u = np.cumsum(config.input_probs)
    f = config.failure_state
    d_y = config.means.shape[2]
    units, truth = [], []
    for j in range(config.n_units):
        states, inputs = [], []
        u = _draw(cum_u, rng.random())
        x = _draw(cum_pi, rng.random())
        states.append(x)
        inputs.append(u)
        while x != f:
            if len(states) >= config.max_horizon:
                raise DatasetError(f"unit {j + 1} did not fail within max_horizon={config.max_horizon}")
            u = _draw(cum_u, rng.random())
            x = _draw(cum_a[u, x], rng.random())
            states.append(x)
            inputs.append(u)
        s = np.array(states)
        ins = np.array(inputs)
        y = config.means[s, ins] + config.stds[s, ins] * rng.standard_normal((len(s), d_y))
        ops = config.op_centroids[ins]
        units.append(UnitTrajectory(j + 1, y, ops, ins))
        truth.append(s)
    d_u = config.op_centroids.shape[1]
    data = RunToFailureDataset(
        tuple(units),
        tuple(f"{SENSOR_PREFIX}{i}" for i in range(1, d_y + 1)),
        tuple(f"{OP_PREFIX}{i}" for i in range(1, d_u + 1)),
        n_inputs=config.n_inputs,
    )
    return data, truth


# ---------------------------------------------------------------------------
# split


def split(data: RunToFailureDataset, ratio: float = 0.8, seed: int = 0) -> tuple[RunToFailureDataset, RunToFailureDataset]:
    """Seeded unit-level train/test split; no unit appears on both sides."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(data.units)
    if n < 2:
        raise DatasetError("need at least 2 units to split")
    n_train = min(max(int(round(ratio * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.array([u.unit_id for u in data.units])
    train_ids = sorted(ids[perm[:n_train]].tolist())
    test_ids = sorted(ids[perm[n_train:]].tolist())
    return data.subset(train_ids), data.subset(test_ids)

