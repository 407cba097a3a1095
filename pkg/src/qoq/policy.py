"""Gaussian MLP policy with hand-written reverse-mode gradients.

The mean is a tanh MLP ``d_s -> hidden... -> d_a`` with a linear output layer and the
standard deviation is a state-independent ``exp(log_std)``. Weights are stored with
shape (fan_in, fan_out) so a layer computes ``x @ W + b``.

An architecture may carry a fixed (never trained) affine input map and a per-dimension
output scale: ``mean(s) = output_scale * mlp(s @ input_map + input_bias)``. They
precondition the regression and do not add parameters.

Canonical flat order (used by checkpoints and gradient caches): layers in ascending
index, each as W row-major then b; the mean head is the last layer; ``log_std`` last.
Layer groups: ``trunk`` = hidden layers, ``head`` = mean-head layer + ``log_std``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_STD_INIT = -0.5
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
MASKS = ("all", "trunk", "head")
MASK_CODES = {"all": 0, "trunk": 1, "head": 2}
CHECKPOINT_MAGIC = b"QOQPOL1"


class PolicyError(ValueError):
    pass


# -- generic MLP machinery (shared with the autoencoder baseline) -----------------


def glorot_layers(sizes: Sequence[int], rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return layers


def mlp_forward(layers, x: np.ndarray, final_tanh: bool = False):
    """Forward pass keeping the inputs of every layer for the backward pass.

    Hidden layers use tanh; the last layer is linear unless ``final_tanh``.
    Returns (output, inputs) where inputs[l] is the input to layer l.
    """
    inputs = []
    h = x
    last = len(layers) - 1
    for l, (W, b) in enumerate(layers):
        inputs.append(h)
        h = h @ W + b
        if l < last or final_tanh:
            h = np.tanh(h)
    return h, inputs


def mlp_backward(layers, inputs, d_out: np.ndarray, stop_at: int = 0, final_tanh: bool = False, out=None):
    """Batch-summed gradients of a scalar through an MLP.

    ``d_out`` is d(loss)/d(output), shape (B, out). Returns (grads, d_input) with
    grads[l] = (dW, db) for l >= stop_at (None below) and d_input the gradient
    w.r.t. the network input (None unless stop_at == 0).
    """
    grads: list[Any] = [None] * len(layers)
    delta = d_out
    if final_tanh:
        delta = delta * (1.0 - out**2)
    for l in range(len(layers) - 1, stop_at - 1, -1):
        W, _ = layers[l]
        grads[l] = (inputs[l].T @ delta, delta.sum(axis=0))
        if l == 0:
            return grads, delta @ W.T
        delta = (delta @ W.T) * (1.0 - inputs[l] ** 2)
    return grads, None


def mlp_per_sample_backward(layers, inputs, d_out: np.ndarray, stop_at: int = 0) -> list[np.ndarray]:
    """Per-sample flattened (W row-major, b) gradients for layers >= stop_at.

    Returns a list of (B, n_params_l) blocks in ascending layer order.
    """
    blocks: list[np.ndarray] = []
    delta = d_out
    for l in range(len(layers) - 1, stop_at - 1, -1):
        W, _ = layers[l]
        x = inputs[l]
        dW = (x[:, :, None] * delta[:, None, :]).reshape(len(x), -1)
        blocks.append(np.concatenate([dW, delta], axis=1))
        if l > stop_at:
            delta = (delta @ W.T) * (1.0 - inputs[l] ** 2)
    return blocks[::-1]


# -- policy ------------------------------------------------------------------------


def _as_tuple(x, depth: int):
    if x is None:
        return None
    if depth == 1:
        return tuple(float(v) for v in x)
    return tuple(_as_tuple(row, depth - 1) for row in x)


@dataclass(frozen=True)
class PolicyArch:
    d_s: int
    d_a: int
    hidden: tuple[int, ...] = (64, 64)
    input_map: tuple[tuple[float, ...], ...] | None = None
    input_bias: tuple[float, ...] | None = None
    output_scale: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "input_map", _as_tuple(self.input_map, 2))
        object.__setattr__(self, "input_bias", _as_tuple(self.input_bias, 1))
        object.__setattr__(self, "output_scale", _as_tuple(self.output_scale, 1))
        if self.d_s < 1 or self.d_a < 1:
            raise PolicyError("d_s and d_a must be positive")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise PolicyError("hidden must be a non-empty list of positive widths")
        if self.input_map is not None and np.shape(self.input_map) != (self.d_s, self.d_s):
            raise PolicyError("input_map must be d_s x d_s")
        if self.input_bias is not None and len(self.input_bias) != self.d_s:
            raise PolicyError("input_bias must have length d_s")
        if self.output_scale is not None and len(self.output_scale) != self.d_a:
            raise PolicyError("output_scale must have length d_a")

    def features(self, states: np.ndarray) -> np.ndarray:
        x = states if self.input_map is None else states @ np.array(self.input_map)
        return x if self.input_bias is None else x + np.array(self.input_bias)

    @property
    def scale(self) -> np.ndarray:
        return np.ones(self.d_a) if self.output_scale is None else np.array(self.output_scale)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.d_s, *self.hidden, self.d_a)

    def layer_param_counts(self) -> list[int]:
        s = self.sizes
        return [s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1)]

    def group_size(self, mask: str = "all") -> int:
        counts = self.layer_param_counts()
        trunk = sum(counts[:-1])
        head = counts[-1] + self.d_a
        return {"all": trunk + head, "trunk": trunk, "head": head}[check_mask(mask)]

    @property
    def n_params(self) -> int:
        return self.group_size("all")

    def to_json(self) -> dict:
        out = {"d_s": self.d_s, "d_a": self.d_a, "hidden": list(self.hidden)}
        for key in ("input_map", "input_bias", "output_scale"):
            value = getattr(self, key)
            if value is not None:
                out[key] = np.array(value).tolist()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PolicyArch":
        return cls(
            obj["d_s"], obj["d_a"], tuple(obj["hidden"]),
            obj.get("input_map"), obj.get("input_bias"), obj.get("output_scale"),
        )


def check_mask(mask: str) -> str:
    if mask not in MASKS:
        raise PolicyError(f"unknown layer mask {mask!r}; expected one of {MASKS}")
    return mask


@dataclass(eq=False)
class PolicyParams:
    arch: PolicyArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    log_std: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.log_std = np.clip(np.asarray(self.log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)
        sizes = self.arch.sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise PolicyError("number of layers does not match architecture")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[l], sizes[l + 1]) or b.shape != (sizes[l + 1],):
                raise PolicyError(f"layer {l} has wrong shape")
        if self.log_std.shape != (self.arch.d_a,):
            raise PolicyError("log_std has wrong shape")

    @property
    def d_s(self) -> int:
        return self.arch.d_s

    @property
    def d_a(self) -> int:
        return self.arch.d_a

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.weights, self.biases))

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            self.log_std.copy(), dict(self.info),
        )

    def mean(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        return mlp_forward(self.layers, self.arch.features(states))[0] * self.arch.scale

    def act(self, states: np.ndarray) -> np.ndarray:
        """Deterministic action (the Gaussian mean)."""
        return self.mean(states)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.arch == other.arch and bool(np.array_equal(flatten(self), flatten(other)))


def init_params(arch: PolicyArch, seed: int) -> PolicyParams:
    layers = glorot_layers(arch.sizes, np.random.default_rng(seed))
    return PolicyParams(
        arch, [W for W, _ in layers], [b for _, b in layers],
        np.full(arch.d_a, LOG_STD_INIT), {"init_seed": int(seed)},
    )


def flatten(params: PolicyParams) -> np.ndarray:
    parts = []
    for W, b in zip(params.weights, params.biases):
        parts += [W.ravel(), b]
    parts.append(params.log_std)
    return np.concatenate(parts)


def unflatten(arch: PolicyArch, flat: np.ndarray) -> PolicyParams:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (arch.n_params,):
        raise PolicyError(f"expected flat vector of length {arch.n_params}, got {flat.shape}")
    sizes = arch.sizes
    weights, biases = [], []
    i = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[i : i + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        i += fan_in * fan_out
        biases.append(flat[i : i + fan_out].copy())
        i += fan_out
    return PolicyParams(arch, weights, biases, flat[i:].copy())


def mask_slice(arch: PolicyArch, mask: str) -> slice:
    """Position of a layer group inside the canonical flat vector."""
    trunk = arch.group_size("trunk")
    return {"all": slice(0, arch.n_params), "trunk": slice(0, trunk), "head": slice(trunk, arch.n_params)}[
        check_mask(mask)
    ]


def _check_inputs(params: PolicyParams, states: np.ndarray, actions: np.ndarray):
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if states.shape[1] != params.d_s or actions.shape[1] != params.d_a or len(states) != len(actions):
        raise PolicyError(
            f"input shapes {states.shape}, {actions.shape} do not match policy ({params.d_s},{params.d_a})"
        )
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
        raise PolicyError("non-finite state or action")
    return states, actions


def log_prob_batch(params: PolicyParams, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    states, actions = _check_inputs(params, states, actions)
    z = (actions - params.mean(states)) / np.exp(params.log_std)
    return np.sum(-0.5 * z**2 - params.log_std - HALF_LOG_2PI, axis=1)


def log_prob(params: PolicyParams, s: np.ndarray, a: np.ndarray) -> float:
    """log pi(a | s) under the diagonal Gaussian policy."""
    return float(log_prob_batch(params, s, a)[0])


def _loglik_terms(params: PolicyParams, states, actions):
    scale = params.arch.scale
    out, inputs = mlp_forward(params.layers, params.arch.features(states))
    inv_var = np.exp(-2.0 * params.log_std)
    resid = actions - out * scale
    z_sq = resid**2 * inv_var
    # gradient w.r.t. the raw network output
    d_out = resid * inv_var * scale
    return inputs, d_out, z_sq - 1.0, z_sq


def per_sample_grads(params: PolicyParams, states: np.ndarray, actions: np.ndarray, mask: str = "all") -> np.ndarray:
    """Per-sample gradients of log pi(a|s), shape (B, group_size(mask)), canonical order."""
    check_mask(mask)
    states, actions = _check_inputs(params, states, actions)
    inputs, d_out, d_log_std, _ = _loglik_terms(params, states, actions)
    n_layers = len(params.weights)
    if mask == "trunk":
        # skip the head block but backprop through the head weights
        W_head = params.weights[-1]
        delta = (d_out @ W_head.T) * (1.0 - inputs[-1] ** 2)
        blocks = mlp_per_sample_backward(params.layers[:-1], inputs[:-1], delta)
    else:
        stop = 0 if mask == "all" else n_layers - 1
        blocks = mlp_per_sample_backward(params.layers, inputs, d_out, stop_at=stop)
        blocks.append(d_log_std)
    out = np.concatenate(blocks, axis=1)
    if not np.all(np.isfinite(out)):
        raise PolicyError("non-finite gradient")
    return out


def grad_log_prob(params: PolicyParams, s: np.ndarray, a: np.ndarray, mask: str = "all") -> np.ndarray:
    return per_sample_grads(params, s, a, mask)[0]


def nll_and_grad(params: PolicyParams, states: np.ndarray, actions: np.ndarray):
    """Mean negative log-likelihood over a batch and its flat gradient."""
    inputs, d_out, d_log_std, z_sq = _loglik_terms(params, states, actions)
    n = len(states)
    nll = float(np.mean(np.sum(0.5 * z_sq + params.log_std + HALF_LOG_2PI, axis=1)))
    grads, _ = mlp_backward(params.layers, inputs, -d_out / n, stop_at=0)
    parts = []
    for dW, db in grads:
        parts += [dW.ravel(), db]
    parts.append(-d_log_std.sum(axis=0) / n)
    return nll, np.concatenate(parts)


# -- checkpoints -------------------------------------------------------------------


def params_hash(params: PolicyParams) -> bytes:
    """32-byte SHA-256 over the architecture JSON and the f64 parameter payload."""
    h = hashlib.sha256()
    h.update(json.dumps(params.arch.to_json(), sort_keys=True).encode())
    h.update(flatten(params).astype("<f8").tobytes())
    return h.digest()


def checkpoint_bytes(params: PolicyParams) -> bytes:
    header = {"arch": params.arch.to_json(), **{k: v for k, v in params.info.items() if k != "arch"}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + flatten(params).astype("<f8").tobytes()


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> PolicyParams:
    raw = Path(path).read_bytes()
    if raw[:7] != CHECKPOINT_MAGIC:
        raise PolicyError(f"{path}: not a policy checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", raw, 7)
    header = json.loads(raw[11 : 11 + hlen].decode("utf-8"))
    arch = PolicyArch.from_json(header.pop("arch"))
    payload = raw[11 + hlen :]
    if len(payload) != 8 * arch.n_params:
        raise PolicyError(f"{path}: payload has {len(payload)} bytes, expected {8 * arch.n_params}")
    params = unflatten(arch, np.frombuffer(payload, dtype="<f8").astype(np.float64))
    params.info = header
    return params
