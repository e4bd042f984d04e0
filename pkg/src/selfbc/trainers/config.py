"""Trainer hyperparameters."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from ..numerics import InvalidInputError

PRETRAINERS = ("bc", "td3bc", "td3ebc")
REFERENCE_INITS = ("pretrained", "behavior")
BETA_GRID = (1.0, 0.8, 0.6, 0.4, 0.2, 0.1, 0.05, 0.01, 0.005)
SCALE_REF_GRID = (1.0, 0.1, 0.01, 0.001)


@dataclass
class TrainerConfig:
    """All scalars of the TD3+BC / EBC / SelfBC / ESBC family.

    ``tau_ref`` defaults to ``tau * scale_ref``; passing it explicitly
    overrides ``scale_ref``.
    """

    alpha: float = 2.5
    alpha_pretrain: float = 2.5
    beta: float = 1.0
    tau: float = 0.005
    scale_ref: float = 0.01
    tau_ref: float | None = None
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_update_frequency: int = 2
    batch_size: int = 256
    gamma: float = 0.99
    n_bc: int = 200_000
    n_ebc: int = 200_000
    n_selfbc: int = 1_000_000
    n_ens: int = 5
    use_ema: bool = True
    reference_init: str = "pretrained"
    pretrainer: str = "td3ebc"
    hidden_sizes: tuple[int, ...] = (256, 256)
    critic_layer_norm: bool = True
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    done_is_timeout: bool = True
    eval_every: int = 5000
    eval_episodes: int = 10

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.tau_ref is None:
            self.tau_ref = self.tau * self.scale_ref
        problems = []
        if not self.alpha > 0 or not self.alpha_pretrain > 0:
            problems.append("alpha must be positive")
        if not 0 < self.beta <= 1:
            problems.append("beta must lie in (0, 1]")
        if not 0 < self.tau <= 1:
            problems.append("tau must lie in (0, 1]")
        if not self.scale_ref > 0:
            problems.append("scale_ref must be positive")
        if not 0 <= self.tau_ref < 1:
            problems.append("tau_ref must lie in [0, 1)")
        if self.tau_ref > self.tau:
            problems.append("tau_ref must not exceed tau")
        if self.policy_update_frequency < 1 or self.batch_size < 1 or self.n_ens < 1:
            problems.append("frequencies, batch size and ensemble size must be >= 1")
        if min(self.n_bc, self.n_ebc, self.n_selfbc) < 0:
            problems.append("step counts must be nonnegative")
        if not 0 <= self.gamma < 1:
            problems.append("gamma must lie in [0, 1)")
        if self.reference_init not in REFERENCE_INITS:
            problems.append(f"reference_init must be one of {REFERENCE_INITS}")
        if self.pretrainer not in PRETRAINERS:
            problems.append(f"pretrainer must be one of {PRETRAINERS}")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            problems.append("hidden_sizes must be positive")
        if self.eval_every < 1 or self.eval_episodes < 1:
            problems.append("eval cadence and episode count must be >= 1")
        if problems:
            raise InvalidInputError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidInputError(f"unknown trainer config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def for_data(cls, behavior_kind: str, **overrides) -> "TrainerConfig":
        """Defaults per data style: expert-style data uses alpha 1.0, 1e6 pretrain steps, tau_ref 5e-6."""
        if behavior_kind == "expert":
            base = dict(alpha=1.0, alpha_pretrain=1.0, n_ebc=1_000_000, scale_ref=0.001)
        else:
            base = dict(alpha=2.5, alpha_pretrain=2.5, n_ebc=200_000, scale_ref=0.01)
        base.update(overrides)
        return cls(**base)


def desk_config(**overrides) -> TrainerConfig:
    """Smaller networks and step counts that fit a single CPU core."""
    base = dict(hidden_sizes=(32, 32), n_bc=10_000, n_ebc=50_000, n_selfbc=50_000)
    base.update(overrides)
    return TrainerConfig(**base)


__all__ = [
    "BETA_GRID",
    "PRETRAINERS",
    "REFERENCE_INITS",
    "SCALE_REF_GRID",
    "TrainerConfig",
    "desk_config",
]
