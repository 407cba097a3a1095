"""Curation accuracy, ranking consistency (Kendall's W) and summary statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .curation import CurationResult
from .data import Dataset
from .scoring import TrajScore


class MetricError(ValueError):
    pass


@dataclass
class AccuracyReport:
    """Share of the curated data that comes from successful demonstrations.

    ``accuracy`` is the trajectory fraction for trajectory-level selections and the step
    fraction for step-level ones; both fractions are always reported. ``per_mode`` maps
    each generator mode to ``{"selected": k, "total": n}`` trajectory counts.
    """

    method: str
    level: str
    budget: int
    accuracy: float
    traj_accuracy: float
    step_accuracy: float
    n_selected_trajectories: int
    n_selected_steps: int
    per_mode: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def _mode_of(traj) -> str:
    return str(traj.meta.get("mode", traj.label))


def curation_accuracy(result: CurationResult, ds: Dataset) -> AccuracyReport:
    unlabeled = [t.id for t in ds if t.label is None]
    if unlabeled:
        raise MetricError(f"curation accuracy needs labels; unlabeled trajectories: {unlabeled[:10]}")
    by_id = ds.by_id()
    unknown = [t for t in result.traj_ids if t not in by_id]
    if unknown:
        raise MetricError(f"selection references unknown trajectories {unknown[:10]}")
    if result.level == "trajectory":
        steps_per = {t: len(by_id[t]) for t in result.selected}
    else:
        steps_per = {}
        for t, _ in result.selected:
            steps_per[t] = steps_per.get(t, 0) + 1
    n_traj = len(steps_per)
    n_steps = sum(steps_per.values())
    good_traj = sum(by_id[t].label == "success" for t in steps_per)
    good_steps = sum(n for t, n in steps_per.items() if by_id[t].label == "success")
    per_mode: dict[str, dict[str, int]] = {}
    for t in ds:
        entry = per_mode.setdefault(_mode_of(t), {"selected": 0, "total": 0})
        entry["total"] += 1
        entry["selected"] += t.id in steps_per
    traj_acc = good_traj / n_traj
    step_acc = good_steps / n_steps
    return AccuracyReport(
        result.method, result.level, result.budget,
        traj_acc if result.level == "trajectory" else step_acc,
        traj_acc, step_acc, n_traj, n_steps, dict(sorted(per_mode.items())),
    )


@dataclass
class ConsistencyReport:
    method: str
    m: int
    n: int
    w: float

    def to_json(self) -> dict:
        return asdict(self)


def ranking_from_scores(scores: Sequence[TrajScore]) -> list[int]:
    """Trajectory ids best-first; equal scores are ordered by ascending id."""
    return [t.traj_id for t in sorted(scores, key=lambda t: (-t.score, t.traj_id))]


def kendalls_w(rankings: Sequence[Sequence[Hashable]]) -> float:
    """Kendall's coefficient of concordance for m complete rankings without ties.

    Each ranking lists the same n items best-first. W = 12 S / (m^2 (n^3 - n)) where
    S is the sum of squared deviations of the item rank sums from m (n + 1) / 2.
    """
    m = len(rankings)
    if m < 2:
        raise MetricError("need at least two rankings")
    items = list(rankings[0])
    n = len(items)
    if n < 2:
        raise MetricError("need at least two items")
    if len(set(items)) != n:
        raise MetricError("ranking contains repeated items")
    ref = set(items)
    rank_sum = {item: 0 for item in items}
    for r in rankings:
        if len(r) != n or set(r) != ref:
            raise MetricError("rankings must be permutations of the same items")
        for pos, item in enumerate(r, start=1):
            rank_sum[item] += pos
    mean = m * (n + 1) / 2.0
    s = math.fsum((v - mean) ** 2 for v in rank_sum.values())
    return min(1.0, max(0.0, 12.0 * s / (m * m * (n**3 - n))))


def consistency(method: str, score_lists: Sequence[Sequence[TrajScore]]) -> ConsistencyReport:
    rankings = [ranking_from_scores(s) for s in score_lists]
    return ConsistencyReport(method, len(rankings), len(rankings[0]) if rankings else 0, kendalls_w(rankings))


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    """Sample mean and standard error (ddof = 1; zero for a single value)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise MetricError("no values")
    if x.size == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))
