"""Desk-scale environments.

``PointMass`` is a damped 2-D point mass that has to reach a fixed goal
within a 100-step horizon. ``FiniteMdp`` instances are small tabular MDPs
used for exact policy evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .numerics import InvalidInputError

HORIZON = 100
GOAL = np.array([0.8, 0.8])
DAMPING = 0.95
ACCEL_GAIN = 0.1
DT = 0.1
ACTION_COST = 0.01
STATE_DIM = 4
ACTION_DIM = 2
ACTION_BOUND = 1.0


@dataclass
class PointMassState:
    """Batched point-mass state. Arrays have a leading episode axis."""

    position: np.ndarray
    velocity: np.ndarray
    t: int = 0

    def observation(self) -> np.ndarray:
        """The (x, y, vx, vy) vector a policy sees."""
        return np.concatenate([self.position, self.velocity], axis=-1)


def pointmass_reset(rng: np.random.Generator, n: int | None = None) -> PointMassState:
    """Position uniform in [-1, 1]^2, zero velocity, t = 0.

    With ``n`` given, returns ``n`` independent episodes stacked on axis 0.
    """
    shape = (2,) if n is None else (n, 2)
    position = rng.uniform(-1.0, 1.0, size=shape)
    return PointMassState(position, np.zeros(shape), 0)


def pointmass_step(state: PointMassState, action: np.ndarray):
    """Advance one step. Returns ``(next_state, reward, done)``."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != state.position.shape:
        raise InvalidInputError(f"action shape {action.shape} != {state.position.shape}")
    if np.any(np.abs(action) > ACTION_BOUND) or not np.all(np.isfinite(action)):
        raise InvalidInputError("action components must lie in [-1, 1]")
    if state.t >= HORIZON:
        raise InvalidInputError("episode already finished")
    velocity = np.clip(DAMPING * state.velocity + ACCEL_GAIN * action, -1.0, 1.0)
    position = np.clip(state.position + DT * velocity, -1.0, 1.0)
    reward = -np.linalg.norm(position - GOAL, axis=-1) - ACTION_COST * np.sum(action * action, axis=-1)
    t = state.t + 1
    return PointMassState(position, velocity, t), reward, t == HORIZON


@dataclass(frozen=True)
class BehaviorSpec:
    kind: str
    noise_sigma: float = 0.0
    random_action_prob: float = 0.0

    def __post_init__(self):
        if self.kind not in ("expert", "medium", "random"):
            raise InvalidInputError(f"unknown behavior kind {self.kind!r}")
        if not 0.0 <= self.random_action_prob <= 1.0:
            raise InvalidInputError("random_action_prob must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be nonnegative")

    @classmethod
    def named(cls, kind: str) -> "BehaviorSpec":
        if kind == "medium":
            return cls("medium", 0.3, 0.2)
        return cls(kind)


def expert_action(state: PointMassState) -> np.ndarray:
    return np.clip(3.0 * (GOAL - state.position) - 1.0 * state.velocity, -1.0, 1.0)


def scripted_controller(spec: BehaviorSpec, state: PointMassState, rng: np.random.Generator):
    """Dataset-collection policy; works on single or batched states.

    Medium draws its Gaussian noise, then its replacement coin, then the
    uniform replacement action, every call, so the stream advances by a
    fixed amount per step regardless of outcomes.
    """
    shape = state.position.shape
    if spec.kind == "random":
        return rng.uniform(-1.0, 1.0, size=shape)
    action = expert_action(state)
    if spec.kind == "medium":
        noise = rng.normal(0.0, 1.0, size=shape) * spec.noise_sigma
        coin = rng.uniform(size=shape[:-1])
        uniform = rng.uniform(-1.0, 1.0, size=shape)
        action = action + noise
        replace = (coin < spec.random_action_prob)[..., None]
        action = np.where(replace, uniform, action)
    return np.clip(action, -1.0, 1.0)


def rollout_returns(policy_fn, rng: np.random.Generator, n_episodes: int) -> np.ndarray:
    """Undiscounted returns of ``n_episodes`` parallel episodes.

    ``policy_fn(state)`` maps a batched PointMassState to batched actions.
    """
    state = pointmass_reset(rng, n_episodes)
    returns = np.zeros(n_episodes)
    done = False
    while not done:
        action = np.clip(policy_fn(state), -1.0, 1.0)
        state, reward, done = pointmass_step(state, action)
        returns += reward
    return returns


def load_reference_returns() -> dict:
    """Frozen random/expert reference returns used by the normalized score."""
    text = resources.files("selfbc").joinpath("data/pointmass_refs.json").read_text()
    return json.loads(text)


# --- finite MDPs -----------------------------------------------------------


@dataclass
class FiniteMdp:
    P: np.ndarray
    r: np.ndarray
    gamma: float
    rho0: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.rho0 = np.asarray(self.rho0, dtype=np.float64)
        s, a = self.r.shape
        if self.P.shape != (s, a, s) or self.rho0.shape != (s,):
            raise InvalidInputError("inconsistent MDP shapes")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise InvalidInputError("transition rows must be probability vectors")
        if np.any(self.rho0 < 0) or abs(self.rho0.sum() - 1.0) > 1e-12:
            raise InvalidInputError("rho0 must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidInputError("gamma must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.r.shape[0]

    @property
    def n_actions(self) -> int:
        return self.r.shape[1]


def _dirichlet_ones(rng: np.random.Generator, size) -> np.ndarray:
    x = rng.dirichlet(np.ones(size[-1]), size=size[:-1])
    # renormalize so rows sum to one at working precision
    return x / x.sum(axis=-1, keepdims=True)


def random_finite_mdp(seed: int, n_states: int, n_actions: int, gamma: float) -> FiniteMdp:
    if not 2 <= n_states <= 12 or not 2 <= n_actions <= 6:
        raise InvalidInputError("need 2 <= n_states <= 12 and 2 <= n_actions <= 6")
    if not 0.0 < gamma < 1.0:
        raise InvalidInputError("gamma must lie in (0, 1)")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    P = _dirichlet_ones(rng, (n_states, n_actions, n_states))
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    rho0 = _dirichlet_ones(rng, (n_states,))
    return FiniteMdp(P, r, gamma, rho0)
