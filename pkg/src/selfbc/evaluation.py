"""Rollout evaluation, normalized score, dataset BC MSE, and metric files."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import envs
from .dataset import NormStats, OfflineDataset
from .numerics import InvalidInputError, MlpParams, mlp_forward
from .rng import make_stream

METRIC_FIELDS = ("step", "mean_return", "normalized_score", "dataset_bc_mse", "wall_seconds")
REFERENCE_SEED = 0
REFERENCE_EPISODES = 100


@dataclass
class MetricsRecord:
    step: int
    mean_return: float
    normalized_score: float
    dataset_bc_mse: float
    wall_seconds: float = 0.0

    @property
    def log10_bc_mse(self) -> float:
        return math.log10(self.dataset_bc_mse) if self.dataset_bc_mse > 0 else float("-inf")


def evaluate_policy(
    policy: MlpParams, norm: NormStats | None, n_episodes: int = 10, seed: int = 0
) -> float:
    """Mean undiscounted return of deterministic point-mass rollouts.

    Start states come from the ``eval`` stream of ``seed``; the policy sees
    normalized observations.
    """
    if n_episodes < 1:
        raise InvalidInputError("n_episodes must be >= 1")

    def act(state):
        obs = state.observation()
        if norm is not None:
            obs = norm.normalize(obs)
        return mlp_forward(policy, obs)

    returns = envs.rollout_returns(act, make_stream(seed, "eval"), n_episodes)
    return float(returns.mean())


def normalized_score(mean_return: float, random_ref: float, expert_ref: float) -> float:
    if not expert_ref > random_ref:
        raise InvalidInputError("expert reference return must exceed the random one")
    return 100.0 * (mean_return - random_ref) / (expert_ref - random_ref)


def compute_reference_returns(seed: int = REFERENCE_SEED, n_episodes: int = REFERENCE_EPISODES) -> dict:
    """Mean returns of the random and expert scripted controllers.

    The values shipped in ``data/pointmass_refs.json`` were produced by this
    function with the default arguments.
    """
    out = {}
    for kind in ("random", "expert"):
        spec = envs.BehaviorSpec.named(kind)
        act_rng = make_stream(seed, "data", 1)
        returns = envs.rollout_returns(
            lambda s: envs.scripted_controller(spec, s, act_rng),
            make_stream(seed, "eval"),
            n_episodes,
        )
        out[f"{kind}_ref"] = float(returns.mean())
    out.update(seed=seed, n_episodes=n_episodes)
    return out


def dataset_bc_mse(policy: MlpParams, dataset: OfflineDataset, norm: NormStats | None) -> float:
    """Mean over transitions of ||pi(normalize(s)) - a||^2, summed over action dims."""
    states = dataset.states if norm is None else norm.normalize(dataset.states)
    diff = mlp_forward(policy, states) - dataset.actions
    return float(np.mean(np.sum(diff * diff, axis=1)))


class Evaluator:
    """Produces MetricsRecords for a policy: rollout return, score, BC MSE."""

    def __init__(self, dataset: OfflineDataset, norm: NormStats, n_episodes: int = 10,
                 seed: int = 0, refs: dict | None = None):
        self.dataset = dataset
        self.norm = norm
        self.n_episodes = n_episodes
        self.seed = seed
        self.refs = refs or envs.load_reference_returns()

    def __call__(self, policy: MlpParams, step: int, wall_seconds: float = 0.0) -> MetricsRecord:
        ret = evaluate_policy(policy, self.norm, self.n_episodes, self.seed)
        return MetricsRecord(
            step=int(step),
            mean_return=ret,
            normalized_score=normalized_score(ret, self.refs["random_ref"], self.refs["expert_ref"]),
            dataset_bc_mse=dataset_bc_mse(policy, self.dataset, self.norm),
            wall_seconds=float(wall_seconds),
        )


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


class MetricsWriter:
    """Append-only CSV + JSONL writer, flushed after every record."""

    def __init__(self, csv_path, jsonl_path):
        self.csv_path = Path(csv_path)
        self.jsonl_path = Path(jsonl_path)
        for p in (self.csv_path, self.jsonl_path):
            if p.exists():
                raise FileExistsError(f"refusing to overwrite existing metrics file {p}")
        # exclusive creation: a concurrent run targeting the same file fails here
        self._csv = open(self.csv_path, "x", newline="")
        self._jsonl = open(self.jsonl_path, "x")
        self._csv.write(",".join(METRIC_FIELDS) + "\n")
        self._csv.flush()
        self._last_step = None

    def write(self, record: MetricsRecord) -> None:
        if self._last_step is not None and record.step < self._last_step:
            raise InvalidInputError("metric steps must be nondecreasing")
        self._last_step = record.step
        row = asdict(record)
        self._csv.write(",".join(_fmt(row[k]) for k in METRIC_FIELDS) + "\n")
        self._csv.flush()
        obj = {k: (int(row[k]) if k == "step" else float(row[k])) for k in METRIC_FIELDS}
        self._jsonl.write(json.dumps(obj) + "\n")
        self._jsonl.flush()
        os.fsync(self._csv.fileno())

    def close(self) -> None:
        self._csv.close()
        self._jsonl.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_metrics(records: Iterable[MetricsRecord], csv_path, jsonl_path) -> None:
    with MetricsWriter(csv_path, jsonl_path) as writer:
        for record in records:
            writer.write(record)


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise InvalidInputError(f"unexpected metrics header {reader.fieldnames}")
        return [
            MetricsRecord(
                step=int(row["step"]),
                mean_return=float(row["mean_return"]),
                normalized_score=float(row["normalized_score"]),
                dataset_bc_mse=float(row["dataset_bc_mse"]),
                wall_seconds=float(row["wall_seconds"]),
            )
            for row in reader
        ]
