"""Single-step updates: critic learning, behavior cloning, the policy objectives, EMA.

Every update is a pure function ``(state, ...) -> new state``. The policy
objectives share one loss,

    minimize  -lambda * mean Q1(s, pi(s)) + beta * mean ||pi(s) - target(s)||^2

and differ only in where ``target`` comes from: dataset actions (TD3+BC),
the cloned behavior policy (EBC), the EMA reference policy (SelfBC), or the
ensemble-averaged reference action (ESBC). Targets never carry gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from ..dataset import Batch, NormStats
from ..numerics import (
    AdamState,
    InvalidInputError,
    MlpParams,
    adam_step,
    backward,
    forward,
    init_mlp,
    mlp_forward,
    soft_update,
)
from .config import TrainerConfig

log = logging.getLogger(__name__)


@dataclass(eq=False)
class TrainerState:
    q1: MlpParams
    q2: MlpParams
    q1_target: MlpParams
    q2_target: MlpParams
    policy: MlpParams
    policy_target: MlpParams
    behavior: MlpParams
    reference: MlpParams | None
    q1_opt: AdamState
    q2_opt: AdamState
    policy_opt: AdamState
    behavior_opt: AdamState
    norm: NormStats | None = None
    step: int = 0

    def networks(self) -> dict[str, MlpParams]:
        nets = {
            "q1": self.q1,
            "q2": self.q2,
            "q1_target": self.q1_target,
            "q2_target": self.q2_target,
            "policy": self.policy,
            "policy_target": self.policy_target,
            "behavior": self.behavior,
        }
        if self.reference is not None:
            nets["reference"] = self.reference
        return nets

    def optimizers(self) -> dict[str, AdamState]:
        return {
            "q1": self.q1_opt,
            "q2": self.q2_opt,
            "policy": self.policy_opt,
            "behavior": self.behavior_opt,
        }


def _adam(params: MlpParams, cfg: TrainerConfig) -> AdamState:
    return AdamState.zeros_like(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def init_trainer_state(
    state_dim: int,
    action_dim: int,
    cfg: TrainerConfig,
    rng: np.random.Generator,
    norm: NormStats | None = None,
    action_scale: float = 1.0,
) -> TrainerState:
    """Fresh networks: policy, then q1, q2, then behavior, drawn in that order."""
    policy_sizes = (state_dim, *cfg.hidden_sizes, action_dim)
    critic_sizes = (state_dim + action_dim, *cfg.hidden_sizes, 1)
    policy = init_mlp(policy_sizes, rng, "tanh", action_scale)
    q1 = init_mlp(critic_sizes, rng, uses_layer_norm=cfg.critic_layer_norm)
    q2 = init_mlp(critic_sizes, rng, uses_layer_norm=cfg.critic_layer_norm)
    behavior = init_mlp(policy_sizes, rng, "tanh", action_scale)
    return TrainerState(
        q1=q1,
        q2=q2,
        q1_target=q1.copy(),
        q2_target=q2.copy(),
        policy=policy,
        policy_target=policy.copy(),
        behavior=behavior,
        reference=None,
        q1_opt=_adam(q1, cfg),
        q2_opt=_adam(q2, cfg),
        policy_opt=_adam(policy, cfg),
        behavior_opt=_adam(behavior, cfg),
        norm=norm,
    )


def reset_optimizers(state: TrainerState, cfg: TrainerConfig) -> TrainerState:
    return replace(
        state,
        q1_opt=_adam(state.q1, cfg),
        q2_opt=_adam(state.q2, cfg),
        policy_opt=_adam(state.policy, cfg),
        behavior_opt=_adam(state.behavior, cfg),
    )


# --- critic ------------------------------------------------------------------


def target_noise(rng: np.random.Generator, shape, cfg: TrainerConfig) -> np.ndarray:
    """Clipped Gaussian smoothing noise for the target action."""
    return clip_noise(cfg.policy_noise * rng.standard_normal(shape), cfg)


def clip_noise(raw: np.ndarray, cfg: TrainerConfig) -> np.ndarray:
    return np.clip(raw, -cfg.noise_clip, cfg.noise_clip)


def critic_target(
    batch: Batch,
    state: TrainerState,
    cfg: TrainerConfig,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """Bootstrapped TD target with target-policy smoothing.

    Pass either a noise stream ``rng`` or an explicit, already-clipped
    ``noise`` array. When ``cfg.done_is_timeout`` the done flag marks a time
    limit and the target still bootstraps.
    """
    bound = state.policy_target.action_scale
    next_action = mlp_forward(state.policy_target, batch.next_states)
    if noise is None:
        if rng is None:
            raise InvalidInputError("critic_target needs a noise stream or explicit noise")
        noise = target_noise(rng, next_action.shape, cfg)
    next_action = np.clip(next_action + noise, -bound, bound)
    x = np.concatenate([batch.next_states, next_action], axis=1)
    q1 = mlp_forward(state.q1_target, x)[:, 0]
    q2 = mlp_forward(state.q2_target, x)[:, 0]
    if cfg.done_is_timeout:
        not_done = np.ones_like(batch.rewards)
    else:
        not_done = 1.0 - batch.dones.astype(np.float64)
    return batch.rewards + cfg.gamma * not_done * np.minimum(q1, q2)


def critic_objective(x: np.ndarray, y: np.ndarray):
    """Mean squared TD error for one critic on inputs ``x = [s, a]``."""

    def objective(params: MlpParams):
        q, cache = forward(params, x, keep_cache=True)
        diff = q[:, 0] - y
        loss = float(np.mean(diff * diff))
        grad, _ = backward(params, cache, (2.0 / diff.size) * diff[:, None], input_grad=False)
        return loss, grad

    return objective


def critic_update(batch: Batch, state: TrainerState, cfg: TrainerConfig, y: np.ndarray) -> TrainerState:
    """One Adam step on each critic; targets are left untouched."""
    x = np.concatenate([batch.states, batch.actions], axis=1)
    objective = critic_objective(x, y)
    _, g1 = objective(state.q1)
    _, g2 = objective(state.q2)
    q1, q1_opt = adam_step(state.q1, g1, state.q1_opt)
    q2, q2_opt = adam_step(state.q2, g2, state.q2_opt)
    return replace(state, q1=q1, q2=q2, q1_opt=q1_opt, q2_opt=q2_opt)


# --- behavior cloning ----------------------------------------------------------


def bc_objective(states: np.ndarray, targets: np.ndarray):
    """mean_i ||pi(s_i) - target_i||^2 (squared error summed over action dims)."""

    def objective(params: MlpParams):
        out, cache = forward(params, states, keep_cache=True)
        diff = out - targets
        loss = float(np.mean(np.sum(diff * diff, axis=1)))
        grad, _ = backward(params, cache, (2.0 / diff.shape[0]) * diff, input_grad=False)
        return loss, grad

    return objective


def behavior_cloning_update(batch: Batch, state: TrainerState, cfg: TrainerConfig) -> TrainerState:
    _, grad = bc_objective(batch.states, batch.actions)(state.behavior)
    behavior, opt = adam_step(state.behavior, grad, state.behavior_opt)
    return replace(state, behavior=behavior, behavior_opt=opt)


# --- policy objectives -----------------------------------------------------------


def lambda_from_q(q_values: np.ndarray, alpha: float) -> float:
    denom = float(np.mean(np.abs(q_values)))
    if denom == 0.0 or not np.isfinite(denom):
        log.warning("mean |Q| is %r; falling back to lambda = alpha", denom)
        return float(alpha)
    return float(alpha) / denom


def q_normalizer(states: np.ndarray, state: TrainerState, alpha: float) -> float:
    """lambda = alpha / mean |Q1(s, pi(s))| over the batch, treated as a constant."""
    action = mlp_forward(state.policy, states)
    q = mlp_forward(state.q1, np.concatenate([states, action], axis=1))
    return lambda_from_q(q, alpha)


def policy_objective(
    states: np.ndarray,
    targets: np.ndarray,
    critic: MlpParams,
    lam: float | None,
    beta: float = 1.0,
    alpha: float | None = None,
):
    """-lam * mean Q(s, pi(s)) + beta * mean ||pi(s) - targets||^2, as a loss to minimize.

    ``critic`` and ``targets`` are constants of the objective; only the
    policy parameters receive gradient. With ``lam=None`` the normalizer is
    computed from this forward pass as ``alpha / mean|Q|`` and then held
    constant, which gives the same gradient as q_normalizer followed by a
    fixed-lambda objective.
    """
    n, state_dim = states.shape

    def objective(params: MlpParams):
        action, pcache = forward(params, states, keep_cache=True)
        q, qcache = forward(critic, np.concatenate([states, action], axis=1), keep_cache=True)
        scale = lambda_from_q(q, alpha) if lam is None else lam
        diff = action - targets
        loss = -scale * float(np.mean(q)) + beta * float(np.mean(np.sum(diff * diff, axis=1)))
        _, dq_dx = backward(critic, qcache, np.full((n, 1), -scale / n))
        grad_action = dq_dx[:, state_dim:] + (2.0 * beta / n) * diff
        grad, _ = backward(params, pcache, grad_action, input_grad=False)
        return loss, grad

    return objective


def _policy_step(
    state: TrainerState, states: np.ndarray, targets: np.ndarray, alpha: float, beta: float
) -> TrainerState:
    _, grad = policy_objective(states, targets, state.q1, None, beta, alpha)(state.policy)
    policy, opt = adam_step(state.policy, grad, state.policy_opt)
    return replace(state, policy=policy, policy_opt=opt)


def update_targets(state: TrainerState, tau: float) -> TrainerState:
    return replace(
        state,
        q1_target=soft_update(state.q1_target, state.q1, tau),
        q2_target=soft_update(state.q2_target, state.q2, tau),
        policy_target=soft_update(state.policy_target, state.policy, tau),
    )


def ema_reference_update(state: TrainerState, cfg: TrainerConfig) -> TrainerState:
    """reference <- tau_ref * policy + (1 - tau_ref) * reference; a no-op without EMA."""
    if state.reference is None:
        raise InvalidInputError("reference policy is not initialized")
    if not cfg.use_ema:
        return state
    return replace(state, reference=soft_update(state.reference, state.policy, cfg.tau_ref))


def policy_update_bc(
    batch: Batch, state: TrainerState, cfg: TrainerConfig, alpha: float | None = None
) -> TrainerState:
    """TD3+BC step (beta = 1) or its beta-relaxed variant, then target updates."""
    alpha = cfg.alpha if alpha is None else alpha
    state = _policy_step(state, batch.states, batch.actions, alpha, cfg.beta)
    return update_targets(state, cfg.tau)


def policy_update_ebc(
    batch: Batch, state: TrainerState, cfg: TrainerConfig, alpha: float | None = None
) -> TrainerState:
    """Constrain toward the frozen behavior policy's action pi_b(s)."""
    alpha = cfg.alpha if alpha is None else alpha
    targets = mlp_forward(state.behavior, batch.states)
    state = _policy_step(state, batch.states, targets, alpha, 1.0)
    return update_targets(state, cfg.tau)


def policy_update_selfbc(batch: Batch, state: TrainerState, cfg: TrainerConfig) -> TrainerState:
    """Constrain toward the reference policy, then EMA the reference, then targets."""
    if state.reference is None:
        raise InvalidInputError("reference policy is not initialized")
    targets = mlp_forward(state.reference, batch.states)
    state = _policy_step(state, batch.states, targets, cfg.alpha, 1.0)
    state = ema_reference_update(state, cfg)
    return update_targets(state, cfg.tau)


def esbc_shared_action(states: np.ndarray, references: list[MlpParams]) -> np.ndarray:
    """Average action of the ensemble's reference policies on ``states``."""
    if not references:
        raise InvalidInputError("ensemble must contain at least one reference policy")
    first = references[0]
    if any(not r.same_architecture(first) for r in references):
        raise InvalidInputError("ensemble references must share one architecture")
    actions = np.stack([mlp_forward(r, states) for r in references])
    return np.add.reduce(actions, axis=0) / len(references)


def esbc_policy_update(
    batch: Batch, state: TrainerState, shared_action: np.ndarray, cfg: TrainerConfig
) -> TrainerState:
    """One ensemble member's step toward the shared reference action."""
    if state.reference is None:
        raise InvalidInputError("reference policy is not initialized")
    state = _policy_step(state, batch.states, shared_action, cfg.alpha, 1.0)
    state = ema_reference_update(state, cfg)
    return update_targets(state, cfg.tau)
