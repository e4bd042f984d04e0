"""Offline transition datasets: generation, normalization, sampling, SBC1 files.

SBC1 layout (all little-endian)::

    offset  size  field
    0       4     magic b"SBC1"
    4       4     u32 version (= 1)
    8       8     u64 n (transition count)
    16      4     u32 state_dim
    20      4     u32 action_dim
    24      4     u32 CRC32 of every byte after the header
    28      4     reserved, zero
    32      ...   states       n*state_dim  f64
                  actions      n*action_dim f64
                  rewards      n            f64
                  next_states  n*state_dim  f64
                  dones        n            u8
                  meta_len     u32
                  meta         meta_len bytes of UTF-8 JSON
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .numerics import InvalidInputError

MAGIC = b"SBC1"
VERSION = 1
HEADER = struct.Struct("<4sIQIIII")
assert HEADER.size == 32
NORM_EPS = 1e-3


class DatasetLoadError(Exception):
    """Base class for SBC1 read failures."""


class MagicMismatchError(DatasetLoadError):
    pass


class VersionMismatchError(DatasetLoadError):
    pass


class TruncatedFileError(DatasetLoadError):
    pass


class ChecksumError(DatasetLoadError):
    pass


@dataclass(eq=False)
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.float64)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float64)
        self.rewards = np.ascontiguousarray(self.rewards, dtype=np.float64)
        self.next_states = np.ascontiguousarray(self.next_states, dtype=np.float64)
        self.dones = np.ascontiguousarray(self.dones, dtype=bool)
        n = self.states.shape[0]
        if n == 0:
            raise InvalidInputError("dataset must be nonempty")
        if (
            self.actions.shape[0] != n
            or self.rewards.shape != (n,)
            or self.next_states.shape != self.states.shape
            or self.dones.shape != (n,)
        ):
            raise InvalidInputError("dataset arrays are not length-consistent")
        if np.any(np.abs(self.actions) > 1.0):
            raise InvalidInputError("actions must lie in [-1, 1]")
        self.meta = dict(self.meta)
        self.meta.setdefault("state_dim", self.state_dim)
        self.meta.setdefault("action_dim", self.action_dim)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def packed(self) -> np.ndarray:
        """All columns side by side, ``[s | a | r | s' | done]``, built once for fast row gathers."""
        if getattr(self, "_packed", None) is None:
            self._packed = np.hstack(
                [
                    self.states,
                    self.actions,
                    self.rewards[:, None],
                    self.next_states,
                    self.dones[:, None].astype(np.float64),
                ]
            )
        return self._packed

    def episode_returns(self) -> np.ndarray:
        """Returns of the complete episodes (those ending in a done flag)."""
        ends = np.flatnonzero(self.dones)
        starts = np.concatenate([[0], ends[:-1] + 1])
        csum = np.concatenate([[0.0], np.cumsum(self.rewards)])
        return csum[ends + 1] - csum[starts]


def generate_dataset(spec: envs.BehaviorSpec, n_transitions: int, seed: int) -> OfflineDataset:
    """Roll out the scripted controller on the point mass until ``n_transitions`` rows exist.

    Episodes run in parallel and are stored episode-major; if the count is
    not a multiple of the horizon the last episode is cut short.
    """
    from .rng import make_stream

    if n_transitions < 1000:
        raise InvalidInputError("n_transitions must be at least 1000")
    n_episodes = -(-n_transitions // envs.HORIZON)
    reset_rng = make_stream(seed, "data", 0)
    act_rng = make_stream(seed, "data", 1)
    state = envs.pointmass_reset(reset_rng, n_episodes)
    H = envs.HORIZON
    obs = np.empty((n_episodes, H, envs.STATE_DIM))
    nxt = np.empty_like(obs)
    acts = np.empty((n_episodes, H, envs.ACTION_DIM))
    rews = np.empty((n_episodes, H))
    dones = np.zeros((n_episodes, H), dtype=bool)
    for t in range(H):
        obs[:, t] = state.observation()
        action = envs.scripted_controller(spec, state, act_rng)
        state, reward, done = envs.pointmass_step(state, action)
        acts[:, t] = action
        rews[:, t] = reward
        nxt[:, t] = state.observation()
        dones[:, t] = done
    n = n_transitions
    meta = {
        "env_name": "pointmass",
        "behavior_kind": spec.kind,
        "noise_sigma": spec.noise_sigma,
        "random_action_prob": spec.random_action_prob,
        "seed": int(seed),
        "state_dim": envs.STATE_DIM,
        "action_dim": envs.ACTION_DIM,
        "dones_are_timeouts": True,
    }
    return OfflineDataset(
        obs.reshape(-1, envs.STATE_DIM)[:n],
        acts.reshape(-1, envs.ACTION_DIM)[:n],
        rews.reshape(-1)[:n],
        nxt.reshape(-1, envs.STATE_DIM)[:n],
        dones.reshape(-1)[:n],
        meta,
    )


@dataclass(eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, s: np.ndarray) -> np.ndarray:
        return (s - self.mean) / self.std

    def denormalize(self, s: np.ndarray) -> np.ndarray:
        return s * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def compute_norm_stats(dataset: OfflineDataset) -> NormStats:
    """Per-dimension mean/std over states and next_states together, std floored at 1e-3."""
    both = np.concatenate([dataset.states, dataset.next_states], axis=0)
    mean = both.mean(axis=0)
    std = np.maximum(both.std(axis=0), NORM_EPS)
    return NormStats(mean, std)


def payload_size(n: int, state_dim: int, action_dim: int) -> int:
    """Bytes of array payload (excluding the meta blob and its length prefix)."""
    return 8 * n * (2 * state_dim + action_dim + 1) + n


def dataset_serialize(dataset: OfflineDataset, path) -> None:
    meta = json.dumps(dataset.meta, sort_keys=True).encode("utf-8")
    body = b"".join(
        [
            dataset.states.astype("<f8").tobytes(),
            dataset.actions.astype("<f8").tobytes(),
            dataset.rewards.astype("<f8").tobytes(),
            dataset.next_states.astype("<f8").tobytes(),
            dataset.dones.astype(np.uint8).tobytes(),
            struct.pack("<I", len(meta)),
            meta,
        ]
    )
    header = HEADER.pack(
        MAGIC, VERSION, dataset.n, dataset.state_dim, dataset.action_dim, zlib.crc32(body), 0
    )
    Path(path).write_bytes(header + body)


def dataset_deserialize(path) -> OfflineDataset:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise MagicMismatchError(f"{path}: not an SBC1 file")
    if len(raw) < HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, version, n, sd, ad, crc, _ = HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    body = raw[HEADER.size:]
    need = payload_size(n, sd, ad) + 4
    if len(body) < need:
        raise TruncatedFileError(f"{path}: payload truncated")
    (meta_len,) = struct.unpack_from("<I", body, need - 4)
    if len(body) < need + meta_len:
        raise TruncatedFileError(f"{path}: meta truncated")
    if len(body) > need + meta_len:
        raise ChecksumError(f"{path}: trailing bytes after meta")
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")

    offset = 0

    def take(count, dtype, shape):
        nonlocal offset
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += count * np.dtype(dtype).itemsize
        return arr.copy()

    states = take(n * sd, "<f8", (n, sd))
    actions = take(n * ad, "<f8", (n, ad))
    rewards = take(n, "<f8", (n,))
    next_states = take(n * sd, "<f8", (n, sd))
    dones = take(n, np.uint8, (n,)).astype(bool)
    meta = json.loads(body[need:need + meta_len].decode("utf-8"))
    return OfflineDataset(states, actions, rewards, next_states, dones, meta)


@dataclass(eq=False)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    indices: np.ndarray


def sample_indices(n: int, rng: np.random.Generator, batch_size: int) -> np.ndarray:
    if batch_size > n:
        raise InvalidInputError(f"batch_size {batch_size} exceeds dataset size {n}")
    return rng.integers(0, n, size=batch_size)


def sample_batch(dataset: OfflineDataset, rng: np.random.Generator, batch_size: int) -> Batch:
    """Uniform sampling with replacement."""
    idx = sample_indices(dataset.n, rng, batch_size)
    rows = dataset.packed()[idx]
    sd, ad = dataset.state_dim, dataset.action_dim
    return Batch(
        np.ascontiguousarray(rows[:, :sd]),
        np.ascontiguousarray(rows[:, sd:sd + ad]),
        rows[:, sd + ad],
        np.ascontiguousarray(rows[:, sd + ad + 1:2 * sd + ad + 1]),
        rows[:, -1] != 0.0,
        idx,
    )
