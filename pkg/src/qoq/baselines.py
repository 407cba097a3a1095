"""Comparison curators: random, all-data and latent-similarity retrieval.

Retrieval embeds standardized (s, a) vectors with a small deterministic tanh
autoencoder (d -> 32 -> 8 -> 32 -> d) and scores each training step by the negative
Euclidean distance to its nearest validation step in latent space.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .curation import BudgetPolicy, CurationError, CurationResult, select_top_steps, select_top_trajectories
from .data import Dataset, dataset_hash
from .policy import glorot_layers, mlp_backward, mlp_forward
from .scoring import StepScore, aggregate_by_ids
from .training import TrainConfig, TrainReport, TrainingError, minibatch_adam

AE_MAGIC = b"QOQAE01"
STD_FLOOR = 1e-8


def random_select(ds: Dataset, n: int | BudgetPolicy, seed: int) -> CurationResult:
    """Uniform sample of ``n`` trajectories without replacement."""
    budget = BudgetPolicy.fixed(n) if isinstance(n, int) else n
    try:
        k = budget.resolve(ds)
    except CurationError as exc:
        raise CurationError(f"random_select: {exc}") from None
    rng = np.random.default_rng(seed)
    ids = sorted(ds.ids)
    chosen = rng.choice(len(ids), size=k, replace=False)
    return CurationResult("trajectory", "random", k, str(budget), [ids[i] for i in chosen],
                          dataset_hash(ds), {"seed": int(seed)})


def all_data(ds: Dataset) -> CurationResult:
    return CurationResult("trajectory", "all", len(ds), f"fixed:{len(ds)}", sorted(ds.ids), dataset_hash(ds))


@dataclass(frozen=True)
class AutoencoderArch:
    d_in: int
    hidden: tuple[int, ...] = (32,)
    latent: int = 8

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 1 <= self.latent < self.d_in:
            raise ValueError(f"latent dim must be in [1, d_in), got {self.latent} for d_in={self.d_in}")

    @property
    def sizes(self) -> tuple[int, ...]:
        enc = (self.d_in, *self.hidden, self.latent)
        return enc + enc[-2::-1]

    @property
    def n_encoder_layers(self) -> int:
        return len(self.hidden) + 1


@dataclass(eq=False)
class Autoencoder:
    arch: AutoencoderArch
    layers: list[tuple[np.ndarray, np.ndarray]]
    mean: np.ndarray
    std: np.ndarray

    def flat(self) -> np.ndarray:
        return _flatten_layers(self.layers)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def encode(self, x: np.ndarray) -> np.ndarray:
        z, _ = mlp_forward(self.layers[: self.arch.n_encoder_layers], self.standardize(x), final_tanh=True)
        return z

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        out, _ = mlp_forward(self.layers, self.standardize(x))
        return out

    def loss(self, x: np.ndarray) -> float:
        return float(np.mean((self.reconstruct(x) - self.standardize(x)) ** 2))

    def to_bytes(self) -> bytes:
        header = json.dumps({"d_in": self.arch.d_in, "hidden": list(self.arch.hidden),
                             "latent": self.arch.latent}, sort_keys=True).encode()
        payload = np.concatenate([self.mean, self.std, self.flat()]).astype("<f8")
        return AE_MAGIC + struct.pack("<I", len(header)) + header + payload.tobytes()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Autoencoder":
        if raw[:7] != AE_MAGIC:
            raise ValueError("not an autoencoder file (bad magic)")
        (n,) = struct.unpack_from("<I", raw, 7)
        meta = json.loads(raw[11 : 11 + n])
        arch = AutoencoderArch(meta["d_in"], tuple(meta["hidden"]), meta["latent"])
        vals = np.frombuffer(raw[11 + n :], dtype="<f8").astype(np.float64)
        d = arch.d_in
        return cls(arch, _unflatten_layers(arch.sizes, vals[2 * d :]), vals[:d].copy(), vals[d : 2 * d].copy())

    @classmethod
    def load(cls, path: str | Path) -> "Autoencoder":
        return cls.from_bytes(Path(path).read_bytes())


def _flatten_layers(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])


def _unflatten_layers(sizes, flat: np.ndarray):
    layers, off = [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = flat[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        layers.append((W.copy(), flat[off : off + fan_out].copy()))
        off += fan_out
    if off != len(flat):
        raise ValueError(f"expected {off} autoencoder parameters, got {len(flat)}")
    return layers


def pair_matrix(ds: Dataset) -> np.ndarray:
    """Concatenated (s, a) rows in canonical (id, step) order."""
    states, actions, _ = ds.canonical_pairs()
    return np.concatenate([states, actions], axis=1)


def train_autoencoder(ds: Dataset, cfg: TrainConfig, arch: AutoencoderArch | None = None) -> tuple[Autoencoder, TrainReport]:
    """Minimize the mean squared reconstruction error of standardized (s, a) vectors."""
    x = pair_matrix(ds)
    if len(x) == 0:
        raise TrainingError("cannot train on an empty dataset")
    arch = arch or AutoencoderArch(x.shape[1])
    if arch.d_in != x.shape[1]:
        raise TrainingError(f"autoencoder input dim {arch.d_in} != data dim {x.shape[1]}")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > STD_FLOOR, std, 1.0)
    xs = (x - mean) / std
    start = time.perf_counter()
    theta = _flatten_layers(glorot_layers(arch.sizes, np.random.default_rng(cfg.seed)))

    def loss_grad(th, idx):
        layers = _unflatten_layers(arch.sizes, th)
        batch = xs[idx]
        out, inputs = mlp_forward(layers, batch)
        diff = out - batch
        grads, _ = mlp_backward(layers, inputs, 2.0 * diff / diff.size)
        return float(np.mean(diff**2)), _flatten_layers(grads)

    theta, losses, n_steps = minibatch_adam(theta, len(xs), loss_grad, cfg)
    ae = Autoencoder(arch, _unflatten_layers(arch.sizes, theta), mean, std)
    return ae, TrainReport(losses, n_steps, time.perf_counter() - start, None, asdict(cfg))


def _min_distances(z: np.ndarray, ref: np.ndarray, chunk: int = 1024) -> np.ndarray:
    out = np.empty(len(z))
    for start in range(0, len(z), chunk):
        diff = z[start : start + chunk, None, :] - ref[None, :, :]
        out[start : start + chunk] = np.sqrt((diff**2).sum(axis=2)).min(axis=1)
    return out


def retrieval_step_scores(ds_tr: Dataset, ds_val: Dataset, ae: Autoencoder) -> list[StepScore]:
    """Negative latent distance from each training step to its nearest validation step."""
    if (ds_tr.d_s, ds_tr.d_a) != (ds_val.d_s, ds_val.d_a) or ds_tr.d_s + ds_tr.d_a != ae.arch.d_in:
        raise ValueError("dimension mismatch between datasets and autoencoder")
    if ds_val.n_steps == 0:
        raise ValueError("validation dataset is empty")
    _, _, keys = ds_tr.canonical_pairs()
    sim = -_min_distances(ae.encode(pair_matrix(ds_tr)), ae.encode(pair_matrix(ds_val)))
    return [StepScore(int(t), int(s), float(v)) for (t, s), v in zip(keys, sim)]


def retrieval_select(
    ds_tr: Dataset,
    ds_val: Dataset,
    ae: Autoencoder,
    budget: BudgetPolicy | int,
    level: str = "trajectory",
) -> CurationResult:
    """Top-N trajectories by mean step similarity, or the top ``budget`` steps."""
    steps = retrieval_step_scores(ds_tr, ds_val, ae)
    if level == "trajectory":
        trajs = aggregate_by_ids(steps, ds_tr.ids)
        return select_top_trajectories(trajs, budget, ds_tr, method="retrieval")
    if level == "step":
        if not isinstance(budget, int):
            raise CurationError("step-level retrieval needs an integer step budget")
        return select_top_steps(steps, budget, ds_tr, method="retrieval-step")
    raise CurationError(f"unknown level {level!r}")
