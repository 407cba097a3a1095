"""Behavior cloning with Adam over flattened (s, a) pairs."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset
from .policy import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    PolicyArch,
    PolicyParams,
    flatten,
    init_params,
    log_prob_batch,
    nll_and_grad,
    save_checkpoint,
    unflatten,
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("need epochs >= 1, batch_size >= 1 and lr > 0")


@dataclass
class TrainReport:
    epoch_losses: list[float]
    n_optimizer_steps: int
    wall_seconds: float
    checkpoint_path: str | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


class Adam:
    """Adam on a flat parameter vector, updated in place."""

    def __init__(self, size: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


LossGrad = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def minibatch_adam(
    theta: np.ndarray,
    n_examples: int,
    loss_grad: LossGrad,
    cfg: TrainConfig,
    project: Callable[[np.ndarray], None] | None = None,
) -> tuple[np.ndarray, list[float], int]:
    """Generic minibatch Adam loop.

    ``loss_grad(theta, idx)`` returns the mean loss and gradient over examples ``idx``.
    ``project`` may modify theta in place after every step (e.g. clamping).
    Returns (theta, per-epoch mean losses, optimizer step count).
    """
    opt = Adam(theta.size, cfg.lr, cfg.betas, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 1])
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_examples) if cfg.shuffle else np.arange(n_examples)
        total = 0.0
        for start in range(0, n_examples, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grad = loss_grad(theta, idx)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            total += loss * len(idx)
            opt.step(theta, grad)
            if project is not None:
                project(theta)
        losses.append(total / n_examples)
    return theta, losses, opt.t


def train_bc(
    ds: Dataset,
    arch: PolicyArch,
    cfg: TrainConfig,
    checkpoint_path: str | Path | None = None,
) -> tuple[PolicyParams, TrainReport]:
    """Fit the Gaussian policy by minimizing the mean negative log-likelihood."""
    if ds.n_steps == 0:
        raise TrainingError("cannot train on an empty dataset")
    if (ds.d_s, ds.d_a) != (arch.d_s, arch.d_a):
        raise TrainingError(f"dataset dims ({ds.d_s},{ds.d_a}) do not match arch ({arch.d_s},{arch.d_a})")
    states, actions, _ = ds.canonical_pairs()
    start = time.perf_counter()
    theta = flatten(init_params(arch, cfg.seed))
    n_ls = arch.d_a

    def loss_grad(th, idx):
        return nll_and_grad(unflatten(arch, th), states[idx], actions[idx])

    def clamp(th):
        np.clip(th[-n_ls:], LOG_STD_MIN, LOG_STD_MAX, out=th[-n_ls:])

    theta, losses, n_steps = minibatch_adam(theta, len(states), loss_grad, cfg, clamp)
    params = unflatten(arch, theta)
    params.info = {"init_seed": cfg.seed, "training": {**asdict(cfg), "n_examples": len(states)}}
    report = TrainReport(losses, n_steps, time.perf_counter() - start, None, asdict(cfg))
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
        report.checkpoint_path = str(checkpoint_path)
    return params, report


def bc_loss(params: PolicyParams, ds: Dataset) -> float:
    """Mean -log pi(a|s) over all steps, in canonical (id, step) order."""
    if ds.n_steps == 0:
        raise TrainingError("empty dataset")
    states, actions, _ = ds.canonical_pairs()
    return float(np.mean(-log_prob_batch(params, states, actions)))
