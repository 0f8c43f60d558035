"""Command-line entry point.

Every command works inside a run directory. The first command freezes the
resolved configuration to ``<run-dir>/config.json``; later commands reuse it,
so any output can be regenerated from the directory alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _io
from .agent import (
    Gate,
    GreedyQPolicy,
    SrlaPolicy,
    pretrain_bc,
    train_dqn,
    write_gate_log,
)
from .data import apply_normalizer, NormalizationSpec
from .decoding import StateAnnotation, state_assignment_rows, unit_inputs, viterbi_paths
from .env import write_trace_csv
from .errors import ConfigError, PrerequisiteMissing, SrlaError
from .evaluate import evaluate_policy, format_table, imc, cmc, write_reports_csv
from .features import build_pipeline
from .interpret import (
    fit_state_classifier,
    failure_mode_report,
    importance_report,
    load_sensor_descriptions,
    write_failure_mode_csv,
)
from .iohmm import em_config_dict, load_model, save_model
from .network import load_network, save_network
from .pipeline import (
    SYSTEM_MODES,
    FittedModel,
    Prepared,
    RunConfig,
    fit_model,
    load_prepared,
    make_annotation,
    make_expert,
    make_gate,
    parse_systems,
    parse_value,
    prepare,
    run_comparison,
    run_sweep,
    save_prepared,
)
from .rul import rul_trend, write_trend_csv

log = logging.getLogger("srla")

SEED_REQUIRED = ("train", "compare", "sweep")


# ---------------------------------------------------------------------------
# run directory helpers


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def require(self, *parts: str, hint: str) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise PrerequisiteMissing(f"{p} not found; {hint}")
        return p


def _candidate(args: argparse.Namespace, base: RunConfig) -> RunConfig:
    cfg = base
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        doc = json.loads(path.read_text())
        cfg = RunConfig.from_dict(doc.get("config", doc) if doc.get("schema") == RunConfig.SCHEMA else doc)
    sets = list(args.set or [])
    for flag, key in (("dataset", "dataset.path"), ("format", "dataset.format"), ("synthetic", "dataset.synthetic"),
                      ("n_states", "n_states"), ("system", "system")):
        value = getattr(args, flag, None)
        if value is not None:
            sets.append(f"{key}={json.dumps(value)}")
    cfg = cfg.with_overrides(sets)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def resolve_config(args: argparse.Namespace) -> tuple[RunDir, RunConfig]:
    """Freeze the configuration on first use; afterwards refuse silent changes."""
    run = RunDir(args.run_dir)
    frozen_path = run.path("config.json")
    if args.command in SEED_REQUIRED and args.seed is None:
        raise ConfigError(f"--seed is required for {args.command}")
    if frozen_path.exists():
        frozen = RunConfig.load(frozen_path)
        wanted = _candidate(args, frozen)
        if frozen.seed is None and wanted.seed is not None:
            frozen = replace(frozen, seed=wanted.seed)
            frozen.save(frozen_path)
        if wanted.to_dict() != frozen.to_dict():
            changed = sorted(k for k, v in _flatten(wanted.to_dict()).items() if _flatten(frozen.to_dict()).get(k) != v)
            raise ConfigError(f"{frozen_path} is frozen; these settings differ: {', '.join(changed)} "
                              "(use a new --run-dir)")
        return run, frozen.validate()
    cfg = _candidate(args, RunConfig()).validate()
    cfg.save(frozen_path)
    return run, cfg


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def _prepared(run: RunDir, cfg: RunConfig) -> Prepared:
    if run.path("data", "train.csv").exists():
        return load_prepared(run.path("data"))
    if not (cfg.dataset.path or cfg.dataset.synthetic):
        raise PrerequisiteMissing("no dataset configured; pass --dataset (or --synthetic) or run `srla ingest` first")
    prep = prepare(cfg)
    save_prepared(prep, run.path("data"))
    return prep


def _model(run: RunDir, name: str = "iohmm") -> FittedModel:
    path = run.require("model", f"{name}.json", hint="run `srla fit-iohmm`" + (" --hmm" if name == "hmm" else ""))
    params, meta = load_model(path, with_metadata=True)
    norm = NormalizationSpec.load(run.require("model", f"{name}_norm.json", hint="run `srla fit-iohmm` again"))
    return FittedModel(params, norm, meta.get("log_likelihood_trace", []))


def _annotation(run: RunDir) -> StateAnnotation:
    return StateAnnotation.load(run.require("decode", "annotation.json", hint="run `srla decode`"))


def _write_rows(path: Path, header: Sequence[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args, run: RunDir, cfg: RunConfig) -> None:
    prep = prepare(cfg)
    save_prepared(prep, run.path("data"))
    summary = {
        "n_train": len(prep.train), "n_test": len(prep.test), "n_inputs": prep.train.n_inputs,
        "sensors": list(prep.train.sensor_names), "op_settings": list(prep.train.op_setting_names),
        "test_imc": imc(prep.test, cfg.env.c_r), "test_cmc": cmc(prep.test, cfg.env.c_r, cfg.env.c_f),
    }
    _io.write_document(run.path("data", "summary.json"), "srla/ingest-summary", 1, summary)
    print(f"ingested {len(prep.train)} train / {len(prep.test)} test units, {prep.train.n_inputs} input symbol(s)")


def cmd_fit_iohmm(args, run: RunDir, cfg: RunConfig) -> None:
    prep = _prepared(run, cfg)
    name = "hmm" if args.hmm else "iohmm"
    model = fit_model(prep.train, cfg, use_inputs=not args.hmm)
    save_model(model.params, run.path("model", f"{name}.json"),
               {"log_likelihood_trace": model.trace, "n_states": cfg.n_states, "em": em_config_dict(cfg.em)})
    model.norm.save(run.path("model", f"{name}_norm.json"))
    _write_rows(run.path("model", f"{name}_em_trace.csv"), ["epoch", "log_likelihood"],
                [(i + 1, repr(v)) for i, v in enumerate(model.trace)])
    print(f"fitted {name} with {cfg.n_states} states: log-likelihood {model.trace[-1]:.4f} after {len(model.trace)} epochs")


def cmd_decode(args, run: RunDir, cfg: RunConfig) -> None:
    prep = _prepared(run, cfg)
    model = _model(run)
    if cfg.decode.mode == "value_quantile":
        raise ConfigError("value_quantile decoding needs a pretrained agent and is only available through `compare` and `sweep`")
    ann = make_annotation(model, prep.train, cfg)
    ann.save(run.path("decode", "annotation.json"))
    rows = []
    for part, data in (("train", prep.train), ("test", prep.test)):
        for unit, t, s, label in state_assignment_rows(model.params, apply_normalizer(model.norm, data), ann):
            rows.append((part, unit, t, s, label))
    _write_rows(run.path("decode", "states.csv"), ["split", "unit", "cycle", "state", "condition"], rows)
    _write_rows(run.path("decode", "bands.csv"), ["condition", "state", "median_position"],
                [(b.label, s, repr(m)) for b in ann.condition_map for s, m in zip(b.states, b.median_positions)])
    for d in ann.diagnostics:
        log.warning("%s", d)
    print(f"failure states {sorted(ann.failure_states)}, specialized states {sorted(ann.specialized_states)}")


def cmd_rul(args, run: RunDir, cfg: RunConfig) -> None:
    prep = _prepared(run, cfg)
    model = _model(run)
    ann = _annotation(run)
    data = prep.test if args.split == "test" else prep.train
    rows = []
    for unit in data.units:
        y = model.norm.transform_sensors(unit.sensors)
        for est in rul_trend(model.params, unit_inputs(model.params, unit), y, ann.failure_states, args.stride, cfg.rul):
            rows.append((unit.unit_id, est))
    write_trend_csv(run.path("rul", f"trend_{args.split}.csv"), rows)
    print(f"wrote {len(rows)} RUL estimates for {len(data)} {args.split} units")


def cmd_importance(args, run: RunDir, cfg: RunConfig) -> None:
    prep = _prepared(run, cfg)
    model = _model(run)
    ann = _annotation(run)
    scaled = apply_normalizer(model.norm, prep.train)
    states = np.concatenate(viterbi_paths(model.params, scaled))
    clf = fit_state_classifier(prep.train.stacked_sensors(), states, feature_names=prep.train.sensor_names)
    rep = importance_report(clf, args.top_k)
    _io.write_document(run.path("importance", "state_importance.json"), "srla/importance", 1, rep.to_dict())
    _write_rows(run.path("importance", "state_importance.csv"), ["state", "rank", "feature", "coefficient"],
                [(s, i + 1, f, repr(c)) for s, r in rep.rankings.items() for i, (f, c) in enumerate(r)])
    desc = load_sensor_descriptions(args.descriptions)
    fm = failure_mode_report(model.params, scaled, ann.failure_states, desc, args.top_k)
    write_failure_mode_csv(run.path("importance", "failure_modes.csv"), fm)
    print(f"state classifier accuracy {rep.accuracy:.3f}; {len(fm)} failure-mode rows")


def _srla_parts(run: RunDir, cfg: RunConfig, prep: Prepared):
    model = _model(run)
    ann = _annotation(run)
    gate = make_gate(model, ann, cfg)
    return model, ann, gate, build_pipeline("srla_raw", prep.train)


def cmd_pretrain_bc(args, run: RunDir, cfg: RunConfig) -> None:
    prep = _prepared(run, cfg)
    if cfg.system == "srla":
        model, ann, gate, pipeline = _srla_parts(run, cfg, prep)
        expert = make_expert(cfg, model, ann)
    else:
        gate = None
        pipeline = _baseline_pipeline(run, cfg, prep)
        expert = make_expert(cfg)
    bc_cfg = replace(cfg.bc, seed=cfg.seed if cfg.seed is not None else cfg.bc.seed)
    q, rep = pretrain_bc(expert, prep.train, pipeline, bc_cfg, gate=gate, holdout=prep.test, n_actions=cfg.env.n_actions)
    save_network(q, run.path("agent", "bc.json"))
    _io.write_document(run.path("agent", "bc_report.json"), "srla/bc-report", 1,
                       {"n_pairs": rep.n_pairs, "train_agreement": rep.train_agreement,
                        "holdout_agreement": rep.holdout_agreement, "loss_history": rep.history})
    print(f"cloned {rep.n_pairs} expert pairs: train agreement {rep.train_agreement:.3f}, "
          f"held-out agreement {rep.holdout_agreement:.3f}")


def _baseline_pipeline(run: RunDir, cfg: RunConfig, prep: Prepared):
    mode = SYSTEM_MODES[cfg.system]
    if mode == "iohmm_gamma":
        m = _model(run)
        return build_pipeline(mode, prep.train, m.params, m.norm)
    if mode == "hmm_gamma":
        m = _model(run, "hmm")
        return build_pipeline(mode, prep.train, m.params, m.norm)
    return build_pipeline(mode, prep.train)


def _policy_parts(run: RunDir, cfg: RunConfig, prep: Prepared):
    if cfg.system == "srla":
        _, _, gate, pipeline = _srla_parts(run, cfg, prep)
        return gate, pipeline
    return None, _baseline_pipeline(run, cfg, prep)


def cmd_train(args, run: RunDir, cfg: RunConfig) -> None:
    prep = _prepared(run, cfg)
    gate, pipeline = _policy_parts(run, cfg, prep)
    init = None
    use_bc = cfg.pretrain if cfg.system == "srla" else cfg.pretrain_baselines
    if use_bc:
        init = load_network(run.require("agent", "bc.json", hint="run `srla pretrain-bc` (or set pretrain=false)"))
    q, training = train_dqn(prep.train, pipeline, cfg.agent, cfg.env, init_params=init, seed=cfg.seed, gate=gate)
    save_network(q, run.path("agent", "q.json"))
    training.write_csv(run.path("agent", "training_log.csv"))
    print(f"trained system {cfg.system}: {len(training.episodes)} episodes, {training.total_updates} updates; "
          f"{training.stop_reason}")


def cmd_evaluate(args, run: RunDir, cfg: RunConfig) -> None:
    prep = _prepared(run, cfg)
    gate, pipeline = _policy_parts(run, cfg, prep)
    q = load_network(run.require("agent", "q.json", hint="run `srla train`"))
    policy = SrlaPolicy(q, pipeline, gate) if gate is not None else GreedyQPolicy(q, pipeline)
    ev = evaluate_policy(prep.test, policy, cfg.env, cfg.agent.gamma, q, pipeline, system=cfg.system)
    write_reports_csv(run.path("eval", "metrics.csv"), [ev.report])
    write_trace_csv(run.path("eval", "trace.csv"), ev.traces)
    _write_rows(run.path("eval", "episodes.csv"),
                ["unit", "failure_cycle", "failed", "end_cycle", "remaining_cycles", "cost"],
                [(e.unit_id, e.failure_cycle, int(e.failed), e.end_cycle,
                  "" if e.remaining_cycles is None else e.remaining_cycles, repr(e.total_cost)) for e in ev.episodes])
    if gate is not None:
        write_gate_log(run.path("eval", "gate_log.csv"), policy.log)
    text = format_table([ev.report])
    run.path("eval", "metrics.txt").write_text(text + "\n")
    print(text)


def cmd_compare(args, run: RunDir, cfg: RunConfig) -> None:
    prep = _prepared(run, cfg)
    rows = run_comparison(prep, parse_systems(args.systems), cfg, cfg.seed)
    write_reports_csv(run.path("compare", "table.csv"), rows)
    text = format_table(rows)
    run.path("compare", "table.txt").write_text(text + "\n")
    print(text)


def cmd_sweep(args, run: RunDir, cfg: RunConfig) -> None:
    prep = _prepared(run, cfg)
    values = [parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    extra, rows = run_sweep(prep, cfg, args.param, values, parse_systems(args.systems), cfg.seed)
    write_reports_csv(run.path("sweep", f"{args.param}.csv"), rows, extra)
    print(format_table([replace(r, system=f"{r.system}@{e[args.param]}") for e, r in zip(extra, rows)]))


COMMANDS = {
    "ingest": cmd_ingest,
    "fit-iohmm": cmd_fit_iohmm,
    "decode": cmd_decode,
    "rul": cmd_rul,
    "importance": cmd_importance,
    "pretrain-bc": cmd_pretrain_bc,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srla", description="Maintenance decisions from run-to-failure data.")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--run-dir", required=True, help="directory holding config.json and all outputs")
        p.add_argument("--config", help="RunConfig JSON used when the run directory is new")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. agent.lr=1e-3")
        p.add_argument("--seed", type=int, help="random seed (required for train, compare and sweep)")
        p.add_argument("--dataset", help="run-to-failure file (C-MAPSS text or CSV)")
        p.add_argument("--format", choices=["cmapss_txt", "csv"], help="dataset format (default: from suffix)")
        p.add_argument("--synthetic", help="synthetic generator config JSON instead of a dataset file")
        p.add_argument("--n-states", type=int, dest="n_states", help="number of hidden states")
        p.add_argument("--system", choices=sorted(SYSTEM_MODES), help="system to pretrain/train/evaluate")
        return p

    add("ingest", "load, split and discretize a dataset")
    add("fit-iohmm", "fit the IOHMM by EM").add_argument("--hmm", action="store_true",
                                                          help="fit a plain HMM (no inputs) instead")
    add("decode", "decode failure and specialized states")
    p = add("rul", "Monte-Carlo RUL trend per unit")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p = add("importance", "sensor importance per state and per failure state")
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--descriptions", help="CSV with feature,symbol,description columns")
    add("pretrain-bc", "clone the expert into the Q-network")
    add("train", "train the Q-network")
    add("evaluate", "evaluate the trained policy on the test units")
    p = add("compare", "train and evaluate several systems on one split")
    p.add_argument("--systems", default="1,2,3,4,srla")
    p = add("sweep", "repeat the comparison over a parameter")
    p.add_argument("--param", required=True, choices=["c_f", "n_states"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--systems", default="srla")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run, cfg = resolve_config(args)
        COMMANDS[args.command](args, run, cfg)
    except SrlaError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
