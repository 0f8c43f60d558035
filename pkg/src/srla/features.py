"""State representations fed to the Q-network, one per compared system.

``raw``           z-scored sensors
``raw_plus_ops``  z-scored sensors and operating settings
``hmm_gamma``     causal state posterior of a plain Gaussian HMM
``iohmm_gamma``   causal state posterior of the IOHMM
``srla_raw``      z-scored sensors and operating settings, used inside the gate

Posteriors are filtered (each row uses only cycles up to t) so that a policy
never sees the future of the unit it is acting on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .data import NormalizationSpec, RunToFailureDataset, UnitTrajectory, apply_normalizer, fit_normalizer
from .decoding import unit_inputs
from .errors import ConfigError, PrerequisiteMissing
from .iohmm import IohmmParams, OnlineDecoder

FeatureMode = Literal["raw", "raw_plus_ops", "hmm_gamma", "iohmm_gamma", "srla_raw"]
MODES = ("raw", "raw_plus_ops", "hmm_gamma", "iohmm_gamma", "srla_raw")
GAMMA_MODES = ("hmm_gamma", "iohmm_gamma")


@dataclass
class DecodedUnit:
    """Per-cycle online decoding results: Viterbi state of the prefix and filtered posterior."""

    states: np.ndarray
    posterior: np.ndarray


def decode_online(params: IohmmParams, unit: UnitTrajectory, model_norm: NormalizationSpec | None) -> DecodedUnit:
    y = model_norm.transform_sensors(unit.sensors) if model_norm is not None else unit.sensors
    u = unit_inputs(params, unit)
    dec = OnlineDecoder(params)
    states = np.empty(unit.length, dtype=np.int64)
    post = np.empty((unit.length, params.n_states))
    for t in range(unit.length):
        states[t], post[t] = dec.step(int(u[t]), y[t])
    return DecodedUnit(states, post)


@dataclass
class FeaturePipeline:
    mode: str
    scaler: NormalizationSpec | None = None
    model: IohmmParams | None = None
    model_norm: NormalizationSpec | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown feature mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.mode in GAMMA_MODES and self.model is None:
            raise PrerequisiteMissing(f"feature mode {self.mode} needs a fitted model")
        if self.mode not in GAMMA_MODES and self.scaler is None:
            raise PrerequisiteMissing(f"feature mode {self.mode} needs a fitted normalizer")

    @property
    def dim(self) -> int:
        if self.mode in GAMMA_MODES:
            return self.model.n_states
        n = len(self.scaler.sensor_offset)
        return n + len(self.scaler.op_offset) if self.mode in ("raw_plus_ops", "srla_raw") else n

    def transform_unit(self, unit: UnitTrajectory) -> np.ndarray:
        key = (id(unit), unit.unit_id)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if self.mode in GAMMA_MODES:
            out = decode_online(self.model, unit, self.model_norm).posterior
        elif self.mode == "raw":
            out = self.scaler.transform_sensors(unit.sensors)
        else:
            out = np.hstack([self.scaler.transform_sensors(unit.sensors), self.scaler.transform_ops(unit.op_settings)])
        out = np.ascontiguousarray(out)
        out.flags.writeable = False
        self._cache[key] = out
        return out

    def observer(self, data: RunToFailureDataset):
        """``observe(unit_index, t)`` for :class:`srla.env.MaintenanceEnv`."""
        mats = [self.transform_unit(u) for u in data.units]
        return lambda i, t: mats[i][t - 1]

    def matrices(self, data: RunToFailureDataset) -> list[np.ndarray]:
        return [self.transform_unit(u) for u in data.units]


def build_pipeline(mode: str, train: RunToFailureDataset, model: IohmmParams | None = None,
                   model_norm: NormalizationSpec | None = None) -> FeaturePipeline:
    """Fit the z-score statistics on ``train`` (raw modes) or wrap the fitted model (posterior modes)."""
    if mode in GAMMA_MODES:
        return FeaturePipeline(mode, None, model, model_norm)
    feature_set = "sensors" if mode == "raw" else "sensors_and_ops"
    return FeaturePipeline(mode, fit_normalizer(train, "zscore", feature_set))


def normalized_for_model(data: RunToFailureDataset, model_norm: NormalizationSpec) -> RunToFailureDataset:
    return apply_normalizer(model_norm, data)
