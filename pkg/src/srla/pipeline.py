"""Run configuration and end-to-end orchestration of the compared systems.

Systems::

    1     DQN on z-scored sensors
    2     DQN on z-scored sensors and operating settings
    3     DQN on the filtered posterior of a plain Gaussian HMM
    4     DQN on the filtered posterior of the IOHMM
    srla  gated DQN on sensors and settings, acting only in the specialized states
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import _io
from .agent import (
    AgentConfig,
    Gate,
    GreedyQPolicy,
    SrlaPolicy,
    TrainingLog,
    build_expert,
    pretrain_bc,
    state_values_by_state,
    train_dqn,
)
from .data import (
    NormalizationSpec,
    RunToFailureDataset,
    SyntheticConfig,
    apply_normalizer,
    assign_input_symbols,
    discretize_operating_conditions,
    fit_normalizer,
    generate_synthetic,
    load_run_to_failure,
    save_csv,
    split,
)
from .decoding import DEFAULT_BAND_EDGES, StateAnnotation, annotate, build_specialized_set
from .env import EnvConfig
from .errors import ConfigError, SrlaError
from .evaluate import Evaluation, MetricsReport, evaluate_policy, failed_report
from .features import FeaturePipeline, build_pipeline
from .iohmm import EmConfig, IohmmParams, fit_em, fit_hmm
from .network import BcConfig, NetworkParams
from .rul import RulConfig

log = logging.getLogger(__name__)

SYSTEM_MODES = {"1": "raw", "2": "raw_plus_ops", "3": "hmm_gamma", "4": "iohmm_gamma", "srla": "srla_raw"}
SWEEP_PARAMS = {"c_f": "env.c_f", "n_states": "n_states"}


@dataclass
class DatasetConfig:
    path: str | None = None
    format: str | None = None
    synthetic: str | None = None
    synthetic_seed: int = 0
    sensors: list[str] | None = None
    split_ratio: float = 0.8
    split_seed: int = 0
    n_input_clusters: int | None = None
    discretize_tol: float = 1e-3


@dataclass
class DecodeConfig:
    mode: str = "transition_radius"
    radius: int = 2
    quantile: float = 0.25
    p_fail_threshold: float = 0.5
    band_edges: list[float] = field(default_factory=lambda: list(DEFAULT_BAND_EDGES))
    safety_net: bool = True


@dataclass
class ExpertConfig:
    mode: str = "oracle_margin"
    margin: float = 10


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    n_states: int = 10
    model_norm: str = "minmax"
    em: EmConfig = field(default_factory=EmConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    bc: BcConfig = field(default_factory=BcConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    rul: RulConfig = field(default_factory=RulConfig)
    system: str = "srla"
    pretrain: bool = True
    pretrain_baselines: bool = False
    seed: int | None = None

    SCHEMA = "srla/run-config"
    VERSION = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def with_overrides(self, assignments: Sequence[str]) -> "RunConfig":
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            set_path(d, key.strip(), parse_value(raw))
        return RunConfig.from_dict(d)

    def validate(self) -> "RunConfig":
        if self.system not in SYSTEM_MODES:
            raise ConfigError(f"unknown system {self.system!r}; choose from {', '.join(SYSTEM_MODES)}")
        if self.n_states < 2:
            raise ConfigError("n_states must be at least 2")
        if self.model_norm not in ("minmax", "zscore"):
            raise ConfigError(f"unknown model_norm {self.model_norm!r}")
        if self.decode.mode not in ("transition_radius", "value_quantile"):
            raise ConfigError(f"unknown decode mode {self.decode.mode!r}")
        if self.expert.mode not in ("oracle_margin", "rul_threshold"):
            raise ConfigError(f"unknown expert mode {self.expert.mode!r}")
        self.agent.validate()
        self.env.validate()
        self.rul.validate()
        return self

    def save(self, path: str | Path) -> Path:
        return _io.write_document(path, self.SCHEMA, self.VERSION, {"config": self.to_dict()})

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(_io.read_document(path, cls.SCHEMA, cls.VERSION)["config"])


def _build(cls, d: Any, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in sorted(unknown))}")
    kw = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        kw[name] = _build(type(current), value, f"{prefix}{name}.") if is_dataclass(current) else value
    return cls(**kw)


def parse_value(raw: str) -> Any:
    """JSON value when it parses (numbers, booleans, null, lists), else the raw string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def set_path(d: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


# ---------------------------------------------------------------------------
# stages


@dataclass
class Prepared:
    train: RunToFailureDataset
    test: RunToFailureDataset
    alphabet: np.ndarray


def load_dataset(cfg: DatasetConfig) -> RunToFailureDataset:
    if cfg.synthetic:
        data, _ = generate_synthetic(SyntheticConfig.load(cfg.synthetic), cfg.synthetic_seed)
    elif cfg.path:
        data = load_run_to_failure(cfg.path, cfg.format)
    else:
        raise ConfigError("set dataset.path or dataset.synthetic")
    if cfg.sensors:
        data = data.select_sensors(cfg.sensors)
    return data


def prepare(cfg: RunConfig, data: RunToFailureDataset | None = None) -> Prepared:
    """Split into train/test and attach input symbols learned on the training units."""
    data = load_dataset(cfg.dataset) if data is None else data
    train, test = split(data, cfg.dataset.split_ratio, cfg.dataset.split_seed)
    train, alphabet = discretize_operating_conditions(train, cfg.dataset.n_input_clusters, cfg.dataset.discretize_tol,
                                                      cfg.dataset.split_seed)
    return Prepared(train, assign_input_symbols(test, alphabet), alphabet)


def save_prepared(prep: Prepared, directory: str | Path) -> None:
    directory = Path(directory)
    save_csv(prep.train, directory / "train.csv")
    save_csv(prep.test, directory / "test.csv")
    _io.write_document(directory / "alphabet.json", "srla/input-alphabet", 1, {"centroids": prep.alphabet})


def load_prepared(directory: str | Path) -> Prepared:
    directory = Path(directory)
    alphabet = np.asarray(_io.read_document(directory / "alphabet.json", "srla/input-alphabet", 1)["centroids"],
                          dtype=float)
    alphabet = alphabet.reshape(len(alphabet), -1)
    train = assign_input_symbols(load_run_to_failure(directory / "train.csv", "csv"), alphabet)
    test = assign_input_symbols(load_run_to_failure(directory / "test.csv", "csv"), alphabet)
    return Prepared(train, test, alphabet)


@dataclass
class FittedModel:
    params: IohmmParams
    norm: NormalizationSpec
    trace: list[float]


def fit_model(train: RunToFailureDataset, cfg: RunConfig, use_inputs: bool = True, n_states: int | None = None) -> FittedModel:
    norm = fit_normalizer(train, cfg.model_norm)
    scaled = apply_normalizer(norm, train)
    n = n_states or cfg.n_states
    params, trace = fit_em(scaled, n, cfg.em) if use_inputs else fit_hmm(scaled, n, cfg.em)
    return FittedModel(params, norm, trace)


def make_annotation(model: FittedModel, train: RunToFailureDataset, cfg: RunConfig,
                    value_fn: np.ndarray | None = None) -> StateAnnotation:
    d = cfg.decode
    return annotate(model.params, apply_normalizer(model.norm, train), d.mode, d.radius, d.quantile, value_fn,
                    d.p_fail_threshold, d.band_edges)


def make_gate(model: FittedModel, annotation: StateAnnotation, cfg: RunConfig) -> Gate:
    return Gate(model.params, annotation, model.norm, safety_net=cfg.decode.safety_net)


def make_expert(cfg: RunConfig, model: FittedModel | None = None, annotation: StateAnnotation | None = None):
    if cfg.expert.mode == "oracle_margin":
        return build_expert("oracle_margin", cfg.expert.margin)
    return build_expert("rul_threshold", cfg.expert.margin, model=model.params if model else None,
                        failure_states=annotation.failure_states if annotation else None,
                        model_norm=model.norm if model else None, rul_config=cfg.rul)


@dataclass
class SystemResult:
    system: str
    q: NetworkParams
    pipeline: FeaturePipeline
    training: TrainingLog
    evaluation: Evaluation
    gate: Gate | None = None
    policy: Any = None
    bc_report: Any = None
    annotation: StateAnnotation | None = None
    seconds: float = 0.0

    @property
    def report(self) -> MetricsReport:
        return self.evaluation.report


def srla_prepare(prep: Prepared, cfg: RunConfig, model: FittedModel, seed: int):
    """Annotation, gate, feature pipeline and the (optionally) BC-pretrained network for SRLA."""
    pipeline = build_pipeline("srla_raw", prep.train)
    bc_cfg = replace(cfg.bc, seed=seed)
    q0, report = None, None
    if cfg.decode.mode == "value_quantile":
        # values come from a network cloned on every cycle, before any gate exists
        expert = make_expert(cfg, model, make_annotation(model, prep.train, _radius_cfg(cfg)))
        q_all, _ = pretrain_bc(expert, prep.train, pipeline, bc_cfg)
        probe = make_gate(model, make_annotation(model, prep.train, _radius_cfg(cfg)), cfg)
        values = state_values_by_state(q_all, pipeline, probe, prep.train)
        annotation = make_annotation(model, prep.train, cfg, values)
    else:
        annotation = make_annotation(model, prep.train, cfg)
    gate = make_gate(model, annotation, cfg)
    if cfg.pretrain:
        expert = make_expert(cfg, model, annotation)
        q0, report = pretrain_bc(expert, prep.train, pipeline, bc_cfg, gate=gate, holdout=prep.test,
                                 n_actions=cfg.env.n_actions)
    return annotation, gate, pipeline, q0, report


def _radius_cfg(cfg: RunConfig) -> RunConfig:
    out = copy.deepcopy(cfg)
    out.decode.mode = "transition_radius"
    return out


def run_system(system: str, prep: Prepared, cfg: RunConfig, seed: int, model: FittedModel | None = None,
               hmm: FittedModel | None = None) -> SystemResult:
    """Train and evaluate one system on a shared split."""
    if system not in SYSTEM_MODES:
        raise ConfigError(f"unknown system {system!r}")
    start = time.perf_counter()
    mode = SYSTEM_MODES[system]
    gate = annotation = bc = None
    q0 = None
    if system == "srla":
        model = model or fit_model(prep.train, cfg)
        annotation, gate, pipeline, q0, bc = srla_prepare(prep, cfg, model, seed)
    elif mode == "hmm_gamma":
        hmm = hmm or fit_model(prep.train, cfg, use_inputs=False)
        pipeline = build_pipeline(mode, prep.train, hmm.params, hmm.norm)
    elif mode == "iohmm_gamma":
        model = model or fit_model(prep.train, cfg)
        pipeline = build_pipeline(mode, prep.train, model.params, model.norm)
    else:
        pipeline = build_pipeline(mode, prep.train)
    if system != "srla" and cfg.pretrain_baselines:
        bc_cfg = replace(cfg.bc, seed=seed)
        q0, bc = pretrain_bc(make_expert(cfg), prep.train, pipeline, bc_cfg, holdout=prep.test,
                             n_actions=cfg.env.n_actions)
    q, training = train_dqn(prep.train, pipeline, cfg.agent, cfg.env, init_params=q0, seed=seed, gate=gate)
    policy = SrlaPolicy(q, pipeline, gate) if gate is not None else GreedyQPolicy(q, pipeline)
    ev = evaluate_policy(prep.test, policy, cfg.env, cfg.agent.gamma, q, pipeline, system=system)
    return SystemResult(system, q, pipeline, training, ev, gate, policy, bc, annotation, time.perf_counter() - start)


def run_comparison(prep: Prepared, systems: Sequence[str], cfg: RunConfig, seed: int) -> list[MetricsReport]:
    """One report per system; a failing system is recorded in its row and the run continues."""
    shared: dict[str, FittedModel] = {}
    rows = []
    for system in systems:
        try:
            if system in ("4", "srla") and "iohmm" not in shared:
                shared["iohmm"] = fit_model(prep.train, cfg)
            if system == "3" and "hmm" not in shared:
                shared["hmm"] = fit_model(prep.train, cfg, use_inputs=False)
            res = run_system(system, prep, cfg, seed, shared.get("iohmm"), shared.get("hmm"))
            rows.append(res.report)
            log.info("system %s: q*=%.4f failure=%.1f%% (%.1fs)", system, res.report.q_star_avg,
                     res.report.failure_pct, res.seconds)
        except (SrlaError, ValueError, FloatingPointError) as exc:
            log.warning("system %s failed: %s", system, exc)
            rows.append(failed_report(system, f"{type(exc).__name__}: {exc}"))
    return rows


def run_sweep(prep: Prepared, cfg: RunConfig, param: str, values: Sequence[Any], systems: Sequence[str],
              seed: int) -> tuple[list[dict], list[MetricsReport]]:
    """Repeat the comparison for every value of ``param`` (``c_f`` or ``n_states``)."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    extra, reports = [], []
    for v in values:
        run_cfg = cfg.with_overrides([f"{SWEEP_PARAMS[param]}={json.dumps(v)}"]).validate()
        for r in run_comparison(prep, systems, run_cfg, seed):
            extra.append({param: v})
            reports.append(r)
    return extra, reports


def parse_systems(text: str) -> list[str]:
    systems = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in systems if s not in SYSTEM_MODES]
    if bad or not systems:
        raise ConfigError(f"unknown system(s) {bad}; choose from {', '.join(SYSTEM_MODES)}")
    return systems
