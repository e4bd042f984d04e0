"""Command-line entry point: ``selfbc <subcommand> [options]``.

Every subcommand resolves a JSON run config (defaults, then ``--config``,
then flags), validates every key, and writes into a fresh output directory::

    output_dir/config.json      resolved config; rerun with --config to reproduce
    output_dir/metrics.csv      training subcommands only
    output_dir/metrics.jsonl
    output_dir/checkpoints/
    output_dir/report.json

Outputs are staged in a sibling directory and renamed into place on
success, so a failed command leaves nothing behind. When ``--output-dir``
is absent the directory is created under ``$SELFBC_OUTPUT_ROOT`` (default
``./runs``) with a name derived from the config hash.

Exit codes: 0 success, 1 a verification check failed, 2 bad input or I/O.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import envs
from .dataset import DatasetLoadError, compute_norm_stats, dataset_deserialize, dataset_serialize, generate_dataset
from .evaluation import Evaluator, MetricsWriter, read_metrics_csv
from .numerics import InvalidInputError
from .theory import verify_theory
from .trainers import (
    BETA_GRID,
    SCALE_REF_GRID,
    CheckpointError,
    TrainerConfig,
    desk_config,
    load_checkpoint,
    run_esbc,
    run_pretrain,
    run_selfbc,
    save_checkpoint,
)

log = logging.getLogger("selfbc")

OUTPUT_ROOT_ENV = "SELFBC_OUTPUT_ROOT"
PRESETS = ("desk", "full")

COMMON = {"command": None, "seed": 0, "output_dir": None, "timed": False}
TRAINING = {"dataset_path": None, "trainer_preset": "desk", "trainer": {}}
DEFAULTS = {
    "gen-data": {"env": "pointmass", "kind": "medium", "n_transitions": 100_000},
    "pretrain": {**TRAINING, "algo": "td3ebc"},
    "train-selfbc": {**TRAINING, "checkpoint_path": None},
    "train-esbc": {**TRAINING, "checkpoint_paths": []},
    "sweep-beta": {**TRAINING, "grid": list(BETA_GRID), "seeds": [0]},
    "sweep-scale-ref": {**TRAINING, "checkpoint_path": None, "grid": list(SCALE_REF_GRID)},
    "verify-theory": {"instances": 100, "kappa": None},
    "eval": {"dataset_path": None, "checkpoint_path": None, "n_episodes": 10},
    "export-curves": {"run_dirs": []},
}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- config


def _parse_grid(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")


def _parse_assignment(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def resolve_config(command: str, file_config: dict | None, overrides: dict) -> dict:
    """Merge defaults, a config file and flag overrides; reject unknown keys."""
    cfg = {**COMMON, **DEFAULTS[command], "command": command}
    if "trainer" in cfg:
        cfg["trainer"] = {}
    problems = []
    for source in (file_config or {}, overrides):
        for key, value in source.items():
            if key not in cfg:
                problems.append(f"unknown config key {key!r}")
            elif key == "trainer":
                if not isinstance(value, dict):
                    problems.append("'trainer' must be an object")
                else:
                    cfg["trainer"].update(value)
            else:
                cfg[key] = value
    if cfg["command"] != command:
        problems.append(f"config is for {cfg['command']!r}, not {command!r}")
    if "trainer" in cfg:
        known = set(TrainerConfig.__dataclass_fields__)
        for key in sorted(set(cfg["trainer"]) - known):
            problems.append(f"unknown trainer key {key!r}")
        if cfg["trainer_preset"] not in PRESETS:
            problems.append(f"trainer_preset must be one of {PRESETS}")
    if problems:
        raise ConfigError("; ".join(problems))
    if "trainer" in cfg:
        # store the fully resolved trainer so archived configs are self-contained
        cfg["trainer"] = build_trainer_config(cfg).to_dict()
        cfg["trainer_preset"] = "full"
    return cfg


def build_trainer_config(cfg: dict) -> TrainerConfig:
    overrides = dict(cfg["trainer"])
    try:
        if cfg["trainer_preset"] == "desk":
            return desk_config(**overrides)
        return TrainerConfig(**overrides)
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(f"invalid trainer config: {exc}")


def _config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:10]


def _check_inputs(cfg: dict) -> None:
    missing = []
    for key in ("dataset_path", "checkpoint_path"):
        if key in cfg and cfg["command"] != "gen-data":
            path = cfg[key]
            if path is None or not Path(path).is_file():
                missing.append(f"{key}: {path!r} does not exist")
    for key in ("checkpoint_paths", "run_dirs"):
        if key in cfg:
            if not cfg[key]:
                missing.append(f"{key} is empty")
            for p in cfg[key]:
                if not Path(p).exists():
                    missing.append(f"{key}: {p!r} does not exist")
    if missing:
        raise ConfigError("; ".join(missing))


# ---------------------------------------------------------------- output


class RunDir:
    """A staging directory that becomes ``final`` only on success."""

    def __init__(self, final: Path):
        self.final = final
        if final.exists():
            raise ConfigError(f"output directory {final} already exists")
        self.path = final.parent / f".{final.name}.partial-{os.getpid()}"
        self.path.mkdir(parents=True)

    def commit(self) -> None:
        if self.final.exists():
            raise ConfigError(f"output directory {self.final} appeared while running")
        self.path.rename(self.final)

    def discard(self) -> None:
        shutil.rmtree(self.path, ignore_errors=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _record_dict(rec) -> dict:
    return {
        "step": rec.step,
        "mean_return": rec.mean_return,
        "normalized_score": rec.normalized_score,
        "dataset_bc_mse": rec.dataset_bc_mse,
        "log10_bc_mse": rec.log10_bc_mse,
    }


# ---------------------------------------------------------------- commands


def _load_dataset(cfg):
    try:
        return dataset_deserialize(cfg["dataset_path"])
    except (DatasetLoadError, InvalidInputError) as exc:
        raise ConfigError(f"cannot load dataset: {exc}")


def _load_ckpt(path):
    try:
        return load_checkpoint(path)[0]
    except CheckpointError as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}")


def _train_pretrain(out: Path, dataset, tcfg: TrainerConfig, seed: int, timed: bool):
    (out / "checkpoints").mkdir()
    evaluator = Evaluator(dataset, compute_norm_stats(dataset), tcfg.eval_episodes, seed)
    with MetricsWriter(out / "metrics.csv", out / "metrics.jsonl") as writer:
        state, records = run_pretrain(dataset, tcfg, seed, evaluator, writer.write, timed)
    save_checkpoint(state, out / "checkpoints" / "pretrain.sbck", {"seed": seed})
    return records


def _train_selfbc(out: Path, dataset, ckpt, tcfg: TrainerConfig, seed: int, timed: bool):
    (out / "checkpoints").mkdir()
    evaluator = Evaluator(dataset, ckpt.norm, tcfg.eval_episodes, seed)
    with MetricsWriter(out / "metrics.csv", out / "metrics.jsonl") as writer:
        state, records = run_selfbc(dataset, ckpt, tcfg, seed, evaluator, writer.write, timed)
    save_checkpoint(state, out / "checkpoints" / "selfbc.sbck", {"seed": seed})
    return records


def cmd_gen_data(cfg, out: Path) -> int:
    if cfg["env"] != "pointmass":
        raise ConfigError(f"unknown env {cfg['env']!r}")
    try:
        spec = envs.BehaviorSpec.named(cfg["kind"])
        ds = generate_dataset(spec, int(cfg["n_transitions"]), int(cfg["seed"]))
    except (InvalidInputError, KeyError, ValueError) as exc:
        raise ConfigError(str(exc))
    dataset_serialize(ds, out / "dataset.sbc1")
    returns = ds.episode_returns()
    _write_json(out / "report.json", {
        "dataset": "dataset.sbc1",
        "n": ds.n,
        "meta": ds.meta,
        "mean_episode_return": float(returns.mean()) if returns.size else None,
    })
    return 0


def cmd_pretrain(cfg, out: Path) -> int:
    dataset = _load_dataset(cfg)
    if cfg["algo"] not in ("bc", "td3bc", "td3ebc"):
        raise ConfigError(f"unknown pretraining algorithm {cfg['algo']!r}")
    tcfg = TrainerConfig.from_dict({**cfg["trainer"], "pretrainer": cfg["algo"]})
    records = _train_pretrain(out, dataset, tcfg, int(cfg["seed"]), cfg["timed"])
    _write_json(out / "report.json", {
        "checkpoint": "checkpoints/pretrain.sbck",
        "final": _record_dict(records[-1]) if records else None,
    })
    return 0


def cmd_train_selfbc(cfg, out: Path) -> int:
    dataset = _load_dataset(cfg)
    ckpt = _load_ckpt(cfg["checkpoint_path"])
    tcfg = TrainerConfig.from_dict(cfg["trainer"])
    try:
        records = _train_selfbc(out, dataset, ckpt, tcfg, int(cfg["seed"]), cfg["timed"])
    except CheckpointError as exc:
        raise ConfigError(str(exc))
    _write_json(out / "report.json", {
        "checkpoint": "checkpoints/selfbc.sbck",
        "start": _record_dict(records[0]),
        "final": _record_dict(records[-1]),
    })
    return 0


def cmd_train_esbc(cfg, out: Path) -> int:
    dataset = _load_dataset(cfg)
    ckpts = [_load_ckpt(p) for p in cfg["checkpoint_paths"]]
    tcfg = TrainerConfig.from_dict(cfg["trainer"])
    seed = int(cfg["seed"])
    (out / "checkpoints").mkdir()
    evaluator = Evaluator(dataset, ckpts[0].norm, tcfg.eval_episodes, seed)
    try:
        with MetricsWriter(out / "metrics.csv", out / "metrics.jsonl") as writer:
            states, records = run_esbc(dataset, ckpts, tcfg, seed, evaluator, writer.write, cfg["timed"])
    except (CheckpointError, InvalidInputError) as exc:
        raise ConfigError(str(exc))
    for i, state in enumerate(states):
        save_checkpoint(state, out / "checkpoints" / f"esbc_{i}.sbck", {"seed": seed, "member": i})
    _write_json(out / "report.json", {
        "n_ens": tcfg.n_ens,
        "start": _record_dict(records[0]),
        "final": _record_dict(records[-1]),
    })
    return 0


def _sweep_report(rows, key):
    by_value = {}
    for row in rows:
        by_value.setdefault(row[key], []).append(row["final"])
    return [
        {
            key: value,
            "mean_final_normalized_score": float(np.mean([f["normalized_score"] for f in finals])),
            "mean_final_dataset_bc_mse": float(np.mean([f["dataset_bc_mse"] for f in finals])),
        }
        for value, finals in by_value.items()
    ]


def cmd_sweep_beta(cfg, out: Path) -> int:
    """TD3+BC with the relaxed constraint weight, one run per (beta, seed)."""
    dataset = _load_dataset(cfg)
    rows = []
    for beta in cfg["grid"]:
        for seed in cfg["seeds"]:
            tcfg = TrainerConfig.from_dict({**cfg["trainer"], "beta": beta, "pretrainer": "td3bc"})
            sub = out / "runs" / f"beta={beta:g}" / f"seed={seed}"
            sub.mkdir(parents=True)
            records = _train_pretrain(sub, dataset, tcfg, int(seed), cfg["timed"])
            rows.append({"beta": beta, "seed": seed, "final": _record_dict(records[-1])})
    _write_json(out / "report.json", {"runs": rows, "summary": _sweep_report(rows, "beta")})
    return 0


def cmd_sweep_scale_ref(cfg, out: Path) -> int:
    """SelfBC from one pretrained checkpoint, one run per reference update ratio."""
    dataset = _load_dataset(cfg)
    ckpt = _load_ckpt(cfg["checkpoint_path"])
    seed = int(cfg["seed"])
    rows = []
    for scale in cfg["grid"]:
        trainer = {k: v for k, v in cfg["trainer"].items() if k != "tau_ref"}
        tcfg = TrainerConfig.from_dict({**trainer, "scale_ref": scale})
        sub = out / "runs" / f"scale_ref={scale:g}"
        sub.mkdir(parents=True)
        records = _train_selfbc(sub, dataset, ckpt, tcfg, seed, cfg["timed"])
        rows.append({"scale_ref": scale, "tau_ref": tcfg.tau_ref, "seed": seed,
                     "start": _record_dict(records[0]), "final": _record_dict(records[-1])})
    _write_json(out / "report.json", {"runs": rows, "summary": _sweep_report(rows, "scale_ref")})
    return 0


def cmd_verify_theory(cfg, out: Path) -> int:
    kappa = cfg["kappa"]
    if kappa is not None and not 0.0 <= float(kappa) <= 1.0:
        raise ConfigError(f"kappa must lie in [0, 1], got {kappa}")
    try:
        report = verify_theory(int(cfg["instances"]), None if kappa is None else float(kappa), int(cfg["seed"]))
    except InvalidInputError as exc:
        raise ConfigError(str(exc))
    _write_json(out / "report.json", report)
    counts = report["pass_counts"]
    print(f"verify-theory: {report['n_pass']}/{report['n_instances']} instances pass "
          f"(corollary probes {counts['corollary']}/{counts['corollary_probes']})")
    return 0 if report["all_pass"] else 1


def cmd_eval(cfg, out: Path) -> int:
    dataset = _load_dataset(cfg)
    state = _load_ckpt(cfg["checkpoint_path"])
    evaluator = Evaluator(dataset, state.norm, int(cfg["n_episodes"]), int(cfg["seed"]))
    rec = evaluator(state.policy, state.step)
    _write_json(out / "report.json", _record_dict(rec))
    print(json.dumps(_record_dict(rec)))
    return 0


def cmd_export_curves(cfg, out: Path) -> int:
    """Collect metrics.csv files under the given run directories into one table."""
    lines = ["run,step,mean_return,normalized_score,dataset_bc_mse,log10_bc_mse"]
    n_runs = 0
    for run_dir in cfg["run_dirs"]:
        for csv_path in sorted(Path(run_dir).rglob("metrics.csv")):
            label = str(csv_path.parent)
            try:
                records = read_metrics_csv(csv_path)
            except InvalidInputError as exc:
                raise ConfigError(f"{csv_path}: {exc}")
            n_runs += 1
            for r in records:
                lines.append(",".join([
                    json.dumps(label), str(r.step),
                    *(format(v, ".17g") for v in (r.mean_return, r.normalized_score,
                                                   r.dataset_bc_mse, r.log10_bc_mse)),
                ]))
    if n_runs == 0:
        raise ConfigError("no metrics.csv files found under the given run directories")
    (out / "curves.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "report.json", {"curves": "curves.csv", "n_runs": n_runs})
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-selfbc": cmd_train_selfbc,
    "train-esbc": cmd_train_esbc,
    "sweep-beta": cmd_sweep_beta,
    "sweep-scale-ref": cmd_sweep_scale_ref,
    "verify-theory": cmd_verify_theory,
    "eval": cmd_eval,
    "export-curves": cmd_export_curves,
}


# ---------------------------------------------------------------- argv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfbc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, training=False, dataset=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON run config; flags override its keys")
        p.add_argument("--output-dir", dest="output_dir", help="fresh directory for all outputs")
        p.add_argument("--seed", type=int)
        p.add_argument("--timed", action="store_true", default=None,
                       help="record wall-clock seconds (metrics then differ between reruns)")
        if dataset or training:
            p.add_argument("--dataset", dest="dataset_path")
        if training:
            p.add_argument("--preset", dest="trainer_preset", choices=PRESETS)
            p.add_argument("--set", dest="trainer_set", action="append", type=_parse_assignment,
                           default=[], metavar="KEY=VALUE", help="override a trainer config key")
        return p

    p = add("gen-data", "generate a point-mass dataset")
    p.add_argument("--kind", choices=("expert", "medium", "random"))
    p.add_argument("--n-transitions", dest="n_transitions", type=int)

    p = add("pretrain", "behavior cloning then TD3+EBC / TD3+BC / critic fitting", training=True)
    p.add_argument("--algo", choices=("bc", "td3bc", "td3ebc"))

    p = add("train-selfbc", "SelfBC from a pretrained checkpoint", training=True)
    p.add_argument("--checkpoint", dest="checkpoint_path")
    p.add_argument("--no-ema", dest="no_ema", action="store_true", default=None)
    p.add_argument("--ref-init", dest="ref_init", choices=("pretrained", "behavior"))
    p.add_argument("--scale-ref", dest="scale_ref", type=float)

    p = add("train-esbc", "ensemble SelfBC from several pretrained checkpoints", training=True)
    p.add_argument("--checkpoint", dest="checkpoint_paths", action="append")
    p.add_argument("--n-ens", dest="n_ens", type=int)

    p = add("sweep-beta", "TD3+BC constraint-weight sweep", training=True)
    p.add_argument("--grid", type=_parse_grid)
    p.add_argument("--seeds", type=_parse_ints)

    p = add("sweep-scale-ref", "SelfBC reference update-ratio sweep", training=True)
    p.add_argument("--checkpoint", dest="checkpoint_path")
    p.add_argument("--grid", type=_parse_grid)

    p = add("verify-theory", "exact tabular checks of the improvement bound")
    p.add_argument("--instances", type=int)
    p.add_argument("--kappa", type=float)

    p = add("eval", "evaluate a checkpoint's policy", dataset=True)
    p.add_argument("--checkpoint", dest="checkpoint_path")
    p.add_argument("--episodes", dest="n_episodes", type=int)

    p = add("export-curves", "gather metrics from run directories into curves.csv")
    p.add_argument("--runs", dest="run_dirs", nargs="+")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    ns = vars(args).copy()
    for key in ("command", "config"):
        ns.pop(key)
    trainer = dict(ns.pop("trainer_set", []) or [])
    if ns.pop("no_ema", None):
        trainer["use_ema"] = False
    for flag, key in (("ref_init", "reference_init"), ("scale_ref", "scale_ref"), ("n_ens", "n_ens")):
        value = ns.pop(flag, None)
        if value is not None:
            trainer[key] = value
            if key == "scale_ref":
                trainer["tau_ref"] = None
    out = {k: v for k, v in ns.items() if v is not None}
    if trainer:
        out["trainer"] = trainer
    return out


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    file_config = None
    if args.config is not None:
        try:
            file_config = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}")
        if not isinstance(file_config, dict):
            raise ConfigError("config file must hold a JSON object")
    cfg = resolve_config(command, file_config, _overrides(args))
    if command == "train-esbc" and len(cfg["checkpoint_paths"]) != cfg["trainer"]["n_ens"]:
        raise ConfigError(
            f"n_ens is {cfg['trainer']['n_ens']} but {len(cfg['checkpoint_paths'])} checkpoints were given"
        )
    _check_inputs(cfg)
    if cfg["output_dir"] is None:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        cfg["output_dir"] = str(root / f"{command}-seed{cfg['seed']}-{_config_hash(cfg)}")
    rundir = RunDir(Path(cfg["output_dir"]))
    try:
        _write_json(rundir.path / "config.json", cfg)
        code = COMMANDS[command](cfg, rundir.path)
        rundir.commit()
    except BaseException:
        rundir.discard()
        raise
    print(f"{command}: outputs in {cfg['output_dir']}")
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except (ConfigError, InvalidInputError, OSError) as exc:
        print(f"selfbc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
