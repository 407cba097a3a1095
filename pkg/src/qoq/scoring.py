"""Influence scores from cached gradient sketches.

A training step's score is the reduction (max, mean or sum) over validation steps of
the dot product between the two normalized gradients. Trajectory scores are the mean
of their steps' scores. ``sum`` is the CUPID-equivalent reduction.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .data import Dataset
from .grads import GradCache

SCORE_MODES = ("max", "mean", "sum")
MODE_LABELS = {"max": "max (published)", "mean": "mean (ablation)", "sum": "sum (CUPID-equivalent)"}
WEIGHTINGS = ("steps", "trajectories")
UNIT_BOUND_TOL = 1e-5
_ROW_CHUNK = 2048


class ScoreError(ValueError):
    pass


class StepScore(NamedTuple):
    traj_id: int
    step_idx: int
    score: float


class TrajScore(NamedTuple):
    traj_id: int
    score: float
    n_steps_scored: int


def check_compatible(a: GradCache, b: GradCache) -> None:
    for name, x, y in (
        ("sketch_dim", a.sketch_dim, b.sketch_dim),
        ("oporp_seed", a.oporp_seed, b.oporp_seed),
        ("mask", a.mask, b.mask),
        ("policy_hash", a.policy_hash, b.policy_hash),
        ("renormalized", a.renormalized, b.renormalized),
    ):
        if x != y:
            raise ScoreError(f"incompatible gradient caches: {name} differs ({x!r} vs {y!r})")


def step_score_array(train: GradCache, val: GradCache, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Return (keys, scores) for the training records in canonical order."""
    if mode not in SCORE_MODES:
        raise ScoreError(f"unknown score mode {mode!r}; expected one of {SCORE_MODES}")
    check_compatible(train, val)
    if len(val) == 0:
        raise ScoreError("validation cache is empty")
    train, val = train.sorted(), val.sorted()
    V = val.values.astype(np.float64)
    scores = np.empty(len(train))
    for start in range(0, len(train), _ROW_CHUNK):
        dots = train.values[start : start + _ROW_CHUNK].astype(np.float64) @ V.T
        if mode == "max":
            scores[start : start + _ROW_CHUNK] = dots.max(axis=1)
        elif mode == "mean":
            mean = dots.sum(axis=1) / dots.shape[1]
            # keep min <= mean <= max exact despite rounding in the division
            scores[start : start + _ROW_CHUNK] = np.clip(mean, dots.min(axis=1), dots.max(axis=1))
        else:
            scores[start : start + _ROW_CHUNK] = dots.sum(axis=1)
    if mode != "sum" and len(scores):
        if np.abs(scores).max() > 1.0 + UNIT_BOUND_TOL:
            raise ScoreError(f"{mode}-mode score outside [-1, 1]: are the caches normalized?")
        scores = np.clip(scores, -1.0, 1.0)
    return train.keys, scores


def step_scores(train: GradCache, val: GradCache, mode: str = "max") -> list[StepScore]:
    keys, scores = step_score_array(train, val, mode)
    return [StepScore(int(t), int(s), float(v)) for (t, s), v in zip(keys, scores)]


def aggregate_by_ids(steps: Iterable[StepScore], traj_ids: Iterable[int]) -> list[TrajScore]:
    """Mean step score per trajectory; trajectories without scored steps get -inf."""
    ids = sorted(set(int(t) for t in traj_ids))
    buckets: dict[int, list[tuple[int, float]]] = {t: [] for t in ids}
    for st in steps:
        if st.traj_id not in buckets:
            raise ScoreError(f"step score for unknown trajectory {st.traj_id}")
        buckets[st.traj_id].append((st.step_idx, st.score))
    out = []
    empty = []
    for tid in ids:
        vals = [v for _, v in sorted(buckets[tid])]
        if vals:
            out.append(TrajScore(tid, float(np.mean(vals)), len(vals)))
        else:
            out.append(TrajScore(tid, -math.inf, 0))
            empty.append(tid)
    if empty:
        warnings.warn(f"trajectories with no scored steps (score -inf): {empty}", RuntimeWarning, stacklevel=2)
    return out


def aggregate_trajectories(steps: Iterable[StepScore], ds: Dataset) -> list[TrajScore]:
    return aggregate_by_ids(steps, ds.ids)


def _validation_size(cache: GradCache | None, weighting: str) -> int:
    if cache is None:
        return 0
    if weighting == "steps":
        return len(cache)
    return len(set(cache.keys[:, 0].tolist()))


def combine_weighted(s_pos: float, s_neg: float, n_pos: int, n_neg: int) -> float:
    """(n_pos * s_pos - n_neg * s_neg) / (n_pos + n_neg); exact when one side is empty."""
    if n_neg == 0:
        return s_pos
    if n_pos == 0:
        return -s_neg
    return (n_pos * s_pos - n_neg * s_neg) / (n_pos + n_neg)


def rollout_weighted_scores(
    train: GradCache,
    val_success: GradCache | None,
    val_failure: GradCache | None,
    weighting: str = "steps",
    traj_ids: Iterable[int] | None = None,
) -> list[TrajScore]:
    """Combine success-rollout and failure-rollout QoQ scores.

    combined = (n_pos * S_pos - n_neg * S_neg) / (n_pos + n_neg), where S are
    trajectory-level max-mode scores and n the validation sizes (step or trajectory
    counts, per ``weighting``). An empty or missing side contributes nothing.
    """
    if weighting not in WEIGHTINGS:
        raise ScoreError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")
    n_pos = _validation_size(val_success, weighting)
    n_neg = _validation_size(val_failure, weighting)
    if n_pos + n_neg == 0:
        raise ScoreError("both validation caches are empty")
    ids = train.traj_ids if traj_ids is None else list(traj_ids)

    def side(cache, n):
        if n == 0:
            return None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return {t.traj_id: t for t in aggregate_by_ids(step_scores(train, cache, "max"), ids)}

    pos, neg = side(val_success, n_pos), side(val_failure, n_neg)
    out = []
    for tid in sorted(set(ids)):
        ref = (pos or neg)[tid]
        if ref.n_steps_scored == 0:
            out.append(TrajScore(tid, -math.inf, 0))
            continue
        s_pos = pos[tid].score if pos else 0.0
        s_neg = neg[tid].score if neg else 0.0
        out.append(TrajScore(tid, combine_weighted(s_pos, s_neg, n_pos, n_neg), ref.n_steps_scored))
    return out


@dataclass
class ScoreTable:
    mode: str
    steps: list[StepScore]
    trajectories: list[TrajScore]
    meta: dict = field(default_factory=dict)

    def save(self, out_dir: str | Path) -> None:
        """Write steps.csv, trajectories.csv and the scores.json sidecar."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "steps.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["traj_id", "step_idx", "score"])
            w.writerows((s.traj_id, s.step_idx, repr(s.score)) for s in self.steps)
        with open(out_dir / "trajectories.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["traj_id", "score", "n_steps"])
            w.writerows((t.traj_id, repr(t.score), t.n_steps_scored) for t in self.trajectories)
        sidecar = {"mode": self.mode, "mode_label": MODE_LABELS.get(self.mode, self.mode), **self.meta}
        (out_dir / "scores.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, out_dir: str | Path) -> "ScoreTable":
        out_dir = Path(out_dir)
        meta = json.loads((out_dir / "scores.json").read_text())
        mode = meta.pop("mode")
        meta.pop("mode_label", None)
        steps = []
        steps_path = out_dir / "steps.csv"
        if steps_path.exists():
            with open(steps_path, newline="") as fh:
                steps = [StepScore(int(r["traj_id"]), int(r["step_idx"]), float(r["score"])) for r in csv.DictReader(fh)]
        with open(out_dir / "trajectories.csv", newline="") as fh:
            trajs = [TrajScore(int(r["traj_id"]), float(r["score"]), int(r["n_steps"])) for r in csv.DictReader(fh)]
        return cls(mode, steps, trajs, meta)


def score_caches(train: GradCache, val: GradCache, mode: str = "max", traj_ids: Sequence[int] | None = None) -> ScoreTable:
    steps = step_scores(train, val, mode)
    trajs = aggregate_by_ids(steps, train.traj_ids if traj_ids is None else traj_ids)
    meta = {
        "train_cache": train.digest(),
        "val_cache": val.digest(),
        "oporp_seed": train.oporp_seed,
        "sketch_dim": train.sketch_dim,
        "layers": train.mask,
        "n_val_steps": len(val),
    }
    return ScoreTable(mode, steps, trajs, meta)
