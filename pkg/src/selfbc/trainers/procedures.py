"""End-to-end procedures: pretraining (BC, TD3+BC, TD3+EBC), SelfBC and ESBC.

Random streams per run seed:
  init            network initialization
  sample[0]       pretraining batches      noise[0]      pretraining target smoothing
  sample[1]       SelfBC / ESBC batches    noise[1 + i]  trainer i's target smoothing
so an ESBC run with one trainer consumes exactly the streams of a SelfBC run.
"""

from __future__ import annotations

import logging
import time
from dataclasses import replace
from typing import Callable

import numpy as np

from ..dataset import NormStats, OfflineDataset, compute_norm_stats, sample_batch
from ..numerics import InvalidInputError
from ..rng import make_stream
from .checkpoint import CheckpointError
from .config import TrainerConfig
from .core import (
    TrainerState,
    behavior_cloning_update,
    critic_target,
    critic_update,
    esbc_policy_update,
    esbc_shared_action,
    init_trainer_state,
    policy_update_bc,
    policy_update_ebc,
    policy_update_selfbc,
    reset_optimizers,
    update_targets,
)

log = logging.getLogger(__name__)

MODES = ("bc", "critic", "td3bc", "td3ebc", "selfbc")

# evaluator(policy, step, wall_seconds) -> MetricsRecord
Evaluator = Callable
RecordSink = Callable


def normalized_copy(dataset: OfflineDataset, norm: NormStats) -> OfflineDataset:
    """The dataset with states and next_states normalized; actions/rewards shared."""
    return OfflineDataset(
        norm.normalize(dataset.states),
        dataset.actions,
        dataset.rewards,
        norm.normalize(dataset.next_states),
        dataset.dones,
        dataset.meta,
    )


class _Recorder:
    def __init__(self, evaluator, on_record, timed: bool):
        self.evaluator = evaluator
        self.on_record = on_record
        self.records = []
        self.timed = timed
        self.t0 = time.perf_counter()

    def __call__(self, policy, step):
        if self.evaluator is None:
            return
        wall = time.perf_counter() - self.t0 if self.timed else 0.0
        rec = self.evaluator(policy, step, wall)
        self.records.append(rec)
        if self.on_record is not None:
            self.on_record(rec)


def critic_step(state: TrainerState, batch, cfg: TrainerConfig, noise_rng) -> TrainerState:
    y = critic_target(batch, state, cfg, rng=noise_rng)
    return critic_update(batch, state, cfg, y)


def train_phase(
    state: TrainerState,
    data: OfflineDataset,
    cfg: TrainerConfig,
    mode: str,
    n_steps: int,
    sample_rng: np.random.Generator,
    noise_rng: np.random.Generator | None = None,
    alpha: float | None = None,
    recorder: Callable | None = None,
    record_start: bool = False,
    observer: Callable | None = None,
) -> TrainerState:
    """Run ``n_steps`` updates of one kind on normalized data.

    Modes: ``bc`` trains the behavior policy only; ``critic`` trains the
    critics with the policy frozen; ``td3bc``/``td3ebc``/``selfbc`` train
    critics every step and the policy every ``policy_update_frequency``
    steps. ``observer(t, state)``, if given, sees the state after every step.
    """
    if mode not in MODES:
        raise InvalidInputError(f"unknown training mode {mode!r}")
    if record_start and recorder is not None:
        recorder(state.policy, 0)
    freq = cfg.policy_update_frequency
    for t in range(1, n_steps + 1):
        batch = sample_batch(data, sample_rng, cfg.batch_size)
        if mode == "bc":
            state = behavior_cloning_update(batch, state, cfg)
        else:
            state = critic_step(state, batch, cfg, noise_rng)
            if t % freq == 0:
                if mode == "critic":
                    state = update_targets(state, cfg.tau)
                elif mode == "td3bc":
                    state = policy_update_bc(batch, state, cfg, alpha)
                elif mode == "td3ebc":
                    state = policy_update_ebc(batch, state, cfg, alpha)
                else:
                    state = policy_update_selfbc(batch, state, cfg)
        state = replace(state, step=state.step + 1)
        if observer is not None:
            observer(t, state)
        if recorder is not None and mode != "bc" and t % cfg.eval_every == 0:
            recorder(state.policy, t)
    return state


def run_pretrain(
    dataset: OfflineDataset,
    cfg: TrainerConfig,
    seed: int,
    evaluator: Evaluator | None = None,
    on_record: RecordSink | None = None,
    timed: bool = False,
):
    """Behavior cloning for ``n_bc`` steps, then ``n_ebc`` steps of the chosen pretrainer.

    ``cfg.pretrainer``: ``td3ebc`` (default), ``td3bc`` (uses ``cfg.beta``),
    or ``bc``, which copies the cloned behavior policy into the policy and
    only fits the critics to it. Returns ``(state, records)``.
    """
    norm = compute_norm_stats(dataset)
    data = normalized_copy(dataset, norm)
    state = init_trainer_state(
        dataset.state_dim, dataset.action_dim, cfg, make_stream(seed, "init"), norm
    )
    sample_rng = make_stream(seed, "sample", 0)
    noise_rng = make_stream(seed, "noise", 0)
    recorder = _Recorder(evaluator, on_record, timed)
    state = train_phase(state, data, cfg, "bc", cfg.n_bc, sample_rng)
    if cfg.pretrainer == "bc":
        state = replace(state, policy=state.behavior.copy(), policy_target=state.behavior.copy())
        mode = "critic"
    else:
        mode = cfg.pretrainer
    state = train_phase(
        state, data, cfg, mode, cfg.n_ebc, sample_rng, noise_rng,
        alpha=cfg.alpha_pretrain, recorder=recorder,
    )
    return state, recorder.records


def check_architecture(state: TrainerState, cfg: TrainerConfig, dataset: OfflineDataset) -> None:
    want_policy = (dataset.state_dim, *cfg.hidden_sizes, dataset.action_dim)
    want_critic = (dataset.state_dim + dataset.action_dim, *cfg.hidden_sizes, 1)
    if state.policy.layer_sizes != want_policy or state.behavior.layer_sizes != want_policy:
        raise CheckpointError(
            f"checkpoint policy layers {state.policy.layer_sizes} do not match config {want_policy}"
        )
    for q in (state.q1, state.q2):
        if q.layer_sizes != want_critic or q.uses_layer_norm != cfg.critic_layer_norm:
            raise CheckpointError(
                f"checkpoint critic layers {q.layer_sizes} do not match config {want_critic}"
            )
    if state.norm is None:
        raise CheckpointError("checkpoint carries no state normalization statistics")


def prepare_selfbc(state: TrainerState, cfg: TrainerConfig) -> TrainerState:
    """Hard-copy targets from the learned nets and initialize the reference.

    The reference starts as the learned policy, or as the behavior policy
    when ``cfg.reference_init == "behavior"``. Optimizer moments restart.
    """
    source = state.policy if cfg.reference_init == "pretrained" else state.behavior
    state = replace(
        state,
        q1_target=state.q1.copy(),
        q2_target=state.q2.copy(),
        policy_target=state.policy.copy(),
        reference=source.copy(),
        step=0,
    )
    return reset_optimizers(state, cfg)


def run_selfbc(
    dataset: OfflineDataset,
    checkpoint: TrainerState,
    cfg: TrainerConfig,
    seed: int,
    evaluator: Evaluator | None = None,
    on_record: RecordSink | None = None,
    timed: bool = False,
    observer: Callable | None = None,
):
    """Preparation, then ``n_selfbc`` steps. Returns ``(state, records)``.

    The first record (step 0) is taken right after preparation.
    ``observer(t, state)`` is called after every step.
    """
    check_architecture(checkpoint, cfg, dataset)
    state = prepare_selfbc(checkpoint, cfg)
    data = normalized_copy(dataset, state.norm)
    recorder = _Recorder(evaluator, on_record, timed)
    state = train_phase(
        state, data, cfg, "selfbc", cfg.n_selfbc,
        make_stream(seed, "sample", 1), make_stream(seed, "noise", 1),
        recorder=recorder, record_start=True, observer=observer,
    )
    return state, recorder.records


def run_esbc(
    dataset: OfflineDataset,
    checkpoints: list[TrainerState],
    cfg: TrainerConfig,
    seed: int,
    evaluator: Evaluator | None = None,
    on_record: RecordSink | None = None,
    timed: bool = False,
    observer: Callable | None = None,
):
    """Ensemble SelfBC over ``cfg.n_ens`` pretrained trainers.

    Each step samples one batch. On policy-update steps the shared
    reference action is computed from every trainer's current reference
    before any trainer updates. Only trainer 0 is evaluated.

    ``observer(event, t, states)`` is called with ``"shared_action"`` right
    after the shared action is computed and ``"trainer_done"`` after each
    trainer's update; it exists for ordering checks.
    Returns ``(states, records)``.
    """
    if len(checkpoints) != cfg.n_ens:
        raise InvalidInputError(f"expected {cfg.n_ens} checkpoints, got {len(checkpoints)}")
    for ck in checkpoints:
        check_architecture(ck, cfg, dataset)
    states = [prepare_selfbc(ck, cfg) for ck in checkpoints]
    # all trainers see batches normalized with trainer 0's statistics
    data = normalized_copy(dataset, states[0].norm)
    sample_rng = make_stream(seed, "sample", 1)
    noise_rngs = [make_stream(seed, "noise", 1 + i) for i in range(cfg.n_ens)]
    recorder = _Recorder(evaluator, on_record, timed)
    recorder(states[0].policy, 0)
    freq = cfg.policy_update_frequency
    for t in range(1, cfg.n_selfbc + 1):
        batch = sample_batch(data, sample_rng, cfg.batch_size)
        policy_step = t % freq == 0
        if policy_step:
            shared = esbc_shared_action(batch.states, [s.reference for s in states])
            if observer is not None:
                observer("shared_action", t, states)
        for i in range(len(states)):
            s = critic_step(states[i], batch, cfg, noise_rngs[i])
            if policy_step:
                s = esbc_policy_update(batch, s, shared, cfg)
            states[i] = replace(s, step=s.step + 1)
            if observer is not None:
                observer("trainer_done", t, states)
        if t % cfg.eval_every == 0:
            recorder(states[0].policy, t)
    return states, recorder.records
