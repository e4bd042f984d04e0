"""SBCK checkpoint files for TrainerState.

Layout (little-endian)::

    offset  size  field
    0       4     magic b"SBCK"
    4       4     u32 version (= 1)
    8       8     u64 manifest length M
    16      8     u64 payload length P
    24      4     u32 CRC32 of manifest + payload
    28      4     reserved, zero
    32      M     manifest, UTF-8 JSON
    32+M    P     payload: concatenated f64 arrays

The manifest names every array blob with its byte offset and element
count, records each network's architecture and each optimizer's scalars.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..dataset import NormStats
from ..numerics import AdamState, MlpParams
from .core import TrainerState

MAGIC = b"SBCK"
VERSION = 1
HEADER = struct.Struct("<4sIQQII")
assert HEADER.size == 32

_NETS = ("q1", "q2", "q1_target", "q2_target", "policy", "policy_target", "behavior", "reference")
_OPTS = ("q1", "q2", "policy", "behavior")


class CheckpointError(Exception):
    """Unreadable checkpoint or one that does not fit the requested config."""


class _Blobs:
    def __init__(self):
        self.parts: list[bytes] = []
        self.offset = 0

    def add(self, arr: np.ndarray) -> dict:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entry = {"offset": self.offset, "count": int(arr.size)}
        self.parts.append(data)
        self.offset += len(data)
        return entry


def save_checkpoint(state: TrainerState, path, extra: dict | None = None) -> None:
    blobs = _Blobs()
    networks = {}
    for name in _NETS:
        net = getattr(state, name)
        if net is None:
            continue
        networks[name] = {**net.architecture(), "params": blobs.add(net.flat)}
    optimizers = {}
    for name in _OPTS:
        opt: AdamState = getattr(state, f"{name}_opt")
        optimizers[name] = {
            "step_count": opt.step_count,
            **opt.hyper(),
            "first_moment": blobs.add(opt.first_moment),
            "second_moment": blobs.add(opt.second_moment),
        }
    manifest = {
        "networks": networks,
        "optimizers": optimizers,
        "step": int(state.step),
        "norm": None
        if state.norm is None
        else {"mean": blobs.add(state.norm.mean), "std": blobs.add(state.norm.std)},
        "extra": extra or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = b"".join(blobs.parts)
    body = mbytes + payload
    header = HEADER.pack(MAGIC, VERSION, len(mbytes), len(payload), zlib.crc32(body), 0)
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> tuple[TrainerState, dict]:
    """Returns ``(state, extra)``."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SBCK checkpoint")
    _, version, mlen, plen, crc, _ = HEADER.unpack_from(raw, 0)
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {VERSION}")
    body = raw[HEADER.size:]
    if len(body) != mlen + plen:
        raise CheckpointError(f"{path}: truncated or oversized body")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC32 mismatch")
    manifest = json.loads(body[:mlen].decode("utf-8"))
    payload = body[mlen:]

    def blob(entry) -> np.ndarray:
        return np.frombuffer(payload, "<f8", entry["count"], entry["offset"]).astype(np.float64)

    nets = {}
    for name, spec in manifest["networks"].items():
        nets[name] = MlpParams(
            tuple(spec["layer_sizes"]),
            blob(spec["params"]),
            spec["output_activation"],
            spec["action_scale"],
            spec["uses_layer_norm"],
        )
    opts = {}
    for name, spec in manifest["optimizers"].items():
        opts[name] = AdamState(
            spec["step_count"],
            blob(spec["first_moment"]),
            blob(spec["second_moment"]),
            spec["lr"],
            spec["beta1"],
            spec["beta2"],
            spec["eps"],
        )
    norm = manifest["norm"]
    state = TrainerState(
        **{name: nets.get(name) for name in _NETS},
        **{f"{name}_opt": opts[name] for name in _OPTS},
        norm=None if norm is None else NormStats(blob(norm["mean"]), blob(norm["std"])),
        step=manifest["step"],
    )
    return state, manifest["extra"]


def states_equal(a: TrainerState, b: TrainerState) -> bool:
    """Bitwise equality of every network, optimizer, normalizer and the step."""
    na, nb = a.networks(), b.networks()
    if na.keys() != nb.keys() or a.step != b.step:
        return False
    for k in na:
        if na[k].architecture() != nb[k].architecture():
            return False
        if na[k].flat.tobytes() != nb[k].flat.tobytes():
            return False
    for k, oa in a.optimizers().items():
        ob = b.optimizers()[k]
        if oa.step_count != ob.step_count or oa.hyper() != ob.hyper():
            return False
        if oa.first_moment.tobytes() != ob.first_moment.tobytes():
            return False
        if oa.second_moment.tobytes() != ob.second_moment.tobytes():
            return False
    if (a.norm is None) != (b.norm is None):
        return False
    if a.norm is not None:
        if a.norm.mean.tobytes() != b.norm.mean.tobytes() or a.norm.std.tobytes() != b.norm.std.tobytes():
            return False
    return True
