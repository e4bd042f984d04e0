"""Dense feed-forward networks with hand-written reverse-mode gradients.

All parameters of a network live in a single contiguous float64 vector;
weights, biases and layer-norm affine terms are views into it. Gradients
and Adam moments use the same flat layout, so optimizer steps and target
updates are single vector operations.

Weight matrices are stored ``(fan_in, fan_out)`` and inputs are row
batches, i.e. ``h_next = h @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import _kernels as _k

LN_EPS = 1e-5
OUTPUT_ACTIVATIONS = ("tanh", "identity")


class InvalidInputError(ValueError):
    """Raised when shapes, ranges or architectures do not line up."""


def _layout(layer_sizes: Sequence[int], uses_layer_norm: bool):
    """Per-layer ``{name: (start, stop, shape)}`` inside the flat vector, and its length."""
    return _layout_cached(tuple(int(n) for n in layer_sizes), bool(uses_layer_norm))


@lru_cache(maxsize=None)
def _layout_cached(layer_sizes: tuple, uses_layer_norm: bool):
    spans = []
    offset = 0
    n_layers = len(layer_sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        entry = {"W": (offset, offset + fan_in * fan_out, (fan_in, fan_out))}
        offset += fan_in * fan_out
        entry["b"] = (offset, offset + fan_out, (fan_out,))
        offset += fan_out
        if uses_layer_norm and i < n_layers - 1:
            entry["g"] = (offset, offset + fan_out, (fan_out,))
            offset += fan_out
            entry["beta"] = (offset, offset + fan_out, (fan_out,))
            offset += fan_out
        spans.append(entry)
    return tuple(spans), offset


def _views_of(flat: np.ndarray, spans) -> list[dict[str, np.ndarray]]:
    return [{k: flat[a:b].reshape(s) for k, (a, b, s) in entry.items()} for entry in spans]


def param_count(layer_sizes: Sequence[int], uses_layer_norm: bool = False) -> int:
    return _layout(layer_sizes, uses_layer_norm)[1]


@dataclass(eq=False)
class MlpParams:
    """Parameters of one MLP.

    Hidden layers use ReLU (preceded by layer normalization when
    ``uses_layer_norm``). The output layer is either ``identity`` or
    ``tanh`` scaled by ``action_scale``.
    """

    layer_sizes: tuple[int, ...]
    flat: np.ndarray
    output_activation: str = "identity"
    action_scale: float = 1.0
    uses_layer_norm: bool = False
    _views: list = field(init=False, repr=False)

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2 or any(n <= 0 for n in self.layer_sizes):
            raise InvalidInputError(f"bad layer sizes {self.layer_sizes}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise InvalidInputError(f"unknown output activation {self.output_activation!r}")
        if not self.action_scale > 0:
            raise InvalidInputError("action_scale must be positive")
        spans, total = _layout(self.layer_sizes, self.uses_layer_norm)
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (total,):
            raise InvalidInputError(
                f"flat parameter vector has shape {self.flat.shape}, expected ({total},)"
            )
        self._views = _views_of(self.flat, spans)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def weights(self) -> list[np.ndarray]:
        return [v["W"] for v in self._views]

    @property
    def biases(self) -> list[np.ndarray]:
        return [v["b"] for v in self._views]

    @property
    def ln_gains(self) -> list[np.ndarray]:
        return [v["g"] for v in self._views if "g" in v]

    @property
    def ln_biases(self) -> list[np.ndarray]:
        return [v["beta"] for v in self._views if "beta" in v]

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def with_flat(self, flat: np.ndarray) -> "MlpParams":
        """Same architecture, new parameter values."""
        return MlpParams(
            self.layer_sizes, flat, self.output_activation, self.action_scale, self.uses_layer_norm
        )

    def copy(self) -> "MlpParams":
        return self.with_flat(self.flat.copy())

    def architecture(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "output_activation": self.output_activation,
            "action_scale": self.action_scale,
            "uses_layer_norm": self.uses_layer_norm,
        }

    def same_architecture(self, other: "MlpParams") -> bool:
        return self.architecture() == other.architecture()

    def split(self, flat_like: np.ndarray) -> list[dict[str, np.ndarray]]:
        """Per-layer views of a vector laid out like ``flat`` (e.g. a gradient)."""
        return _views_of(flat_like, _layout(self.layer_sizes, self.uses_layer_norm)[0])


def init_mlp(
    layer_sizes: Sequence[int],
    rng: np.random.Generator,
    output_activation: str = "identity",
    action_scale: float = 1.0,
    uses_layer_norm: bool = False,
) -> MlpParams:
    """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Layer-norm gains start at 1 and shifts at 0.
    """
    spans, total = _layout(layer_sizes, uses_layer_norm)
    flat = np.empty(total, dtype=np.float64)
    for entry in spans:
        fan_in = entry["W"][2][0]
        bound = 1.0 / np.sqrt(fan_in)
        for key in ("W", "b"):
            a, b, _ = entry[key]
            flat[a:b] = rng.uniform(-bound, bound, size=b - a)
        if "g" in entry:
            a, b, _ = entry["g"]
            flat[a:b] = 1.0
            a, b, _ = entry["beta"]
            flat[a:b] = 0.0
    return MlpParams(tuple(layer_sizes), flat, output_activation, action_scale, uses_layer_norm)


class ForwardCache:
    __slots__ = ("inputs", "xhats", "invs", "pre_relu", "output", "tanh_out", "batched")

    def __init__(self):
        self.inputs = []
        self.xhats = []
        self.invs = []
        self.pre_relu = []
        self.output = None
        self.tanh_out = None
        self.batched = True


def forward(params: MlpParams, x: np.ndarray, keep_cache: bool = False):
    """Batched forward pass. Returns ``(output, cache)``; cache is None unless requested."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise InvalidInputError(
            f"input has shape {x.shape}, network expects last dim {params.input_dim}"
        )
    x = np.ascontiguousarray(x)
    cache = ForwardCache() if keep_cache else None
    views = params._views
    h = x
    for i in range(params.n_layers - 1):
        v = views[i]
        z = h @ v["W"]
        if params.uses_layer_norm:
            xhat, inv, y, h_next = _k.bias_ln_relu_fwd(z, v["b"], v["g"], v["beta"], LN_EPS)
        else:
            xhat = inv = None
            y, h_next = _k.bias_relu_fwd(z, v["b"])
        if cache is not None:
            cache.inputs.append(h)
            cache.xhats.append(xhat)
            cache.invs.append(inv)
            cache.pre_relu.append(y)
        h = h_next
    v = views[-1]
    use_tanh = params.output_activation == "tanh"
    out, t = _k.bias_out_fwd(h @ v["W"], v["b"], use_tanh, float(params.action_scale))
    if cache is not None:
        cache.inputs.append(h)
        cache.tanh_out = t
        cache.output = out
        cache.batched = batched
    if not batched:
        out = out[0]
    return out, cache


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of row vectors."""
    return forward(params, x)[0]


def backward(params: MlpParams, cache: ForwardCache, grad_out: np.ndarray, input_grad: bool = True):
    """Reverse pass for a cached forward.

    ``grad_out`` is dL/d(output) with the output's batch shape. Returns
    ``(grad_flat, grad_input)``; ``grad_input`` is None when
    ``input_grad`` is false.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.ndim == 1:
        grad_out = grad_out[None, :]
    grad = np.empty_like(params.flat)
    gviews = params.split(grad)
    views = params._views
    use_tanh = params.output_activation == "tanh"
    dz, db = _k.out_bwd(
        np.ascontiguousarray(grad_out), cache.tanh_out, use_tanh, float(params.action_scale)
    )
    last = params.n_layers - 1
    gviews[last]["W"][...] = cache.inputs[last].T @ dz
    gviews[last]["b"][...] = db
    dh = dz @ views[last]["W"].T
    for i in range(last - 1, -1, -1):
        if params.uses_layer_norm:
            dz, db, dg, dbeta = _k.ln_relu_bwd(
                dh, cache.pre_relu[i], cache.xhats[i], cache.invs[i], views[i]["g"]
            )
            gviews[i]["g"][...] = dg
            gviews[i]["beta"][...] = dbeta
        else:
            dz, db = _k.relu_bwd(dh, cache.pre_relu[i])
        gviews[i]["W"][...] = cache.inputs[i].T @ dz
        gviews[i]["b"][...] = db
        if i > 0 or input_grad:
            dh = dz @ views[i]["W"].T
    if not input_grad:
        return grad, None
    if not cache.batched:
        dh = dh[0]
    return grad, dh


# An objective maps parameters to (loss value, flat gradient). Every training
# loss in the package is written this way so that it can be checked against
# finite_diff_grad.
Objective = Callable[[MlpParams], "tuple[float, np.ndarray]"]


def loss_gradient(objective: Objective, params: MlpParams) -> np.ndarray:
    """Gradient of ``objective`` with respect to the trainable ``params``."""
    if not callable(objective):
        raise TypeError("objective must be callable as objective(params) -> (loss, grad)")
    result = objective(params)
    if not (isinstance(result, tuple) and len(result) == 2):
        raise TypeError("objective must return (loss, gradient)")
    grad = np.asarray(result[1], dtype=np.float64)
    if grad.shape != params.flat.shape:
        raise InvalidInputError(
            f"objective returned gradient of shape {grad.shape}, expected {params.flat.shape}"
        )
    return grad


def finite_diff_grad(objective, params: MlpParams, h: float = 1e-6) -> np.ndarray:
    """Central differences (f(p+h e_i) - f(p-h e_i)) / 2h over every coordinate.

    ``objective`` may return a bare float or a ``(loss, grad)`` tuple.
    """
    if not h > 0:
        raise InvalidInputError("finite-difference step must be positive")

    def value(flat):
        out = objective(params.with_flat(flat))
        return float(out[0] if isinstance(out, tuple) else out)

    base = params.flat
    grad = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += h
        minus = base.copy()
        minus[i] -= h
        grad[i] = (value(plus) - value(minus)) / (2.0 * h)
    return grad


@dataclass(eq=False)
class AdamState:
    step_count: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        n = params.flat.size
        return cls(0, np.zeros(n), np.zeros(n), lr, beta1, beta2, eps)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params: MlpParams, grads: np.ndarray, state: AdamState):
    """One bias-corrected Adam step. Returns ``(new_params, new_state)``."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.flat.shape or state.first_moment.shape != params.flat.shape:
        raise InvalidInputError("gradient / moment shapes do not match parameters")
    t = state.step_count + 1
    flat, m, v = _k.adam_update(
        params.flat, grads, state.first_moment, state.second_moment,
        state.lr, state.beta1, state.beta2, state.eps,
        1.0 - state.beta1**t, 1.0 - state.beta2**t,
    )
    new_state = AdamState(t, m, v, state.lr, state.beta1, state.beta2, state.eps)
    return params.with_flat(flat), new_state


def soft_update(target: MlpParams, source: MlpParams, tau: float) -> MlpParams:
    """Polyak average: every parameter becomes tau * source + (1 - tau) * target."""
    if not 0.0 <= tau <= 1.0:
        raise InvalidInputError(f"tau must lie in [0, 1], got {tau}")
    if not target.same_architecture(source):
        raise InvalidInputError("soft_update requires identical architectures")
    return target.with_flat(tau * source.flat + (1.0 - tau) * target.flat)


def hard_copy(source: MlpParams) -> MlpParams:
    return source.copy()
