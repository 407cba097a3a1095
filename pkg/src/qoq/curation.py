"""Budgeted selection of trajectories (or individual steps) from score tables.

Ranking is by score descending with ties broken by ascending trajectory id (then step
index). Trajectories scored ``-inf`` are never selected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset, Trajectory, dataset_hash
from .scoring import StepScore, TrajScore

LEVELS = ("trajectory", "step")


class CurationError(ValueError):
    pass


@dataclass(frozen=True)
class BudgetPolicy:
    """``fixed`` keeps ``n`` trajectories, ``match_success`` as many as there are
    success labels and ``half`` half the dataset (rounded down, at least one)."""

    kind: str
    n: int | None = None

    def __post_init__(self):
        if self.kind not in ("fixed", "match_success", "half"):
            raise CurationError(f"unknown budget kind {self.kind!r}")
        if self.kind == "fixed" and (self.n is None or self.n < 1):
            raise CurationError("fixed budget needs n >= 1")
        if self.kind != "fixed" and self.n is not None:
            raise CurationError(f"{self.kind} budget takes no n")

    @classmethod
    def fixed(cls, n: int) -> "BudgetPolicy":
        return cls("fixed", int(n))

    @classmethod
    def parse(cls, text: str) -> "BudgetPolicy":
        """Parse ``fixed:N``, ``match-success`` or ``half``."""
        text = text.strip()
        if text.startswith("fixed:"):
            try:
                return cls.fixed(int(text[6:]))
            except ValueError:
                raise CurationError(f"bad fixed budget {text!r}") from None
        if text in ("match-success", "match_success"):
            return cls("match_success")
        if text == "half":
            return cls("half")
        raise CurationError(f"bad budget {text!r}; expected fixed:N, match-success or half")

    def __str__(self) -> str:
        return f"fixed:{self.n}" if self.kind == "fixed" else self.kind.replace("_", "-")

    def resolve(self, ds: Dataset) -> int:
        total = len(ds)
        if self.kind == "fixed":
            n = self.n
        elif self.kind == "match_success":
            if any(t.label is None for t in ds):
                raise CurationError("match-success budget needs a fully labeled dataset")
            n = sum(t.label == "success" for t in ds)
        else:
            n = total // 2
        if not 1 <= n <= total:
            raise CurationError(f"budget {self} resolves to {n}, need 1 <= N <= {total} trajectories")
        return n


@dataclass
class CurationResult:
    """A selection plus enough provenance to reproduce and validate it.

    ``selected`` holds trajectory ids (trajectory level, in rank order) or
    ``(traj_id, step_idx)`` pairs (step level, in rank order). ``ties`` lists groups
    of equal-scored candidates that straddle or sit inside the selection, with the
    ids that won the tie-break.
    """

    level: str
    method: str
    budget: int
    budget_policy: str
    selected: list
    dataset_hash: str
    score_ref: dict = field(default_factory=dict)
    ties: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.level not in LEVELS:
            raise CurationError(f"unknown level {self.level!r}")
        if self.level == "trajectory":
            self.selected = [int(t) for t in self.selected]
        else:
            self.selected = [(int(t), int(s)) for t, s in self.selected]
        if len(self.selected) != self.budget:
            raise CurationError(f"selection has {len(self.selected)} items but budget is {self.budget}")
        if len(set(self.selected)) != len(self.selected):
            raise CurationError("duplicate entries in selection")

    @property
    def traj_ids(self) -> list[int]:
        if self.level == "trajectory":
            return sorted(self.selected)
        return sorted({t for t, _ in self.selected})

    def to_json(self) -> dict:
        return {
            "level": self.level,
            "method": self.method,
            "budget": self.budget,
            "budget_policy": self.budget_policy,
            "selected": [list(x) if isinstance(x, tuple) else x for x in self.selected],
            "dataset_hash": self.dataset_hash,
            "score_ref": self.score_ref,
            "ties": self.ties,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CurationResult":
        sel = obj["selected"]
        if obj["level"] == "step":
            sel = [tuple(x) for x in sel]
        return cls(obj["level"], obj["method"], obj["budget"], obj["budget_policy"], sel,
                   obj["dataset_hash"], obj.get("score_ref", {}), obj.get("ties", []))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CurationResult":
        return cls.from_json(json.loads(Path(path).read_text()))


def _tie_log(ranked: Sequence[tuple[float, object]], n: int) -> list[dict]:
    """Groups of equal scores that include at least one selected item."""
    log = []
    pos = 0
    for score, grp in groupby(ranked, key=lambda x: x[0]):
        items = [key for _, key in grp]
        if pos < n and len(items) > 1:
            won = items[: max(0, n - pos)]
            log.append({
                "score": score,
                "candidates": [list(k) if isinstance(k, tuple) else k for k in items],
                "selected": [list(k) if isinstance(k, tuple) else k for k in won],
            })
        pos += len(items)
    return log


def _check_scores(values: Iterable[float]) -> None:
    if any(math.isnan(v) for v in values):
        raise CurationError("NaN score")


def select_top_trajectories(
    scores: Sequence[TrajScore],
    budget: BudgetPolicy | int,
    ds: Dataset,
    method: str = "qoq",
    score_ref: dict | None = None,
) -> CurationResult:
    """Keep the N best trajectories by (score desc, id asc)."""
    if isinstance(budget, int):
        budget = BudgetPolicy.fixed(budget)
    by_id = {t.traj_id: t.score for t in scores}
    if len(by_id) != len(scores):
        raise CurationError("duplicate trajectory ids in score list")
    missing = set(ds.ids) - set(by_id)
    extra = set(by_id) - set(ds.ids)
    if missing or extra:
        raise CurationError(f"scores do not cover the dataset: missing {sorted(missing)}, unknown {sorted(extra)}")
    _check_scores(by_id.values())
    n = budget.resolve(ds)
    ranked = sorted(((s, t) for t, s in by_id.items() if s != -math.inf), key=lambda x: (-x[0], x[1]))
    if n > len(ranked):
        raise CurationError(
            f"budget {n} exceeds the {len(ranked)} scoreable trajectories "
            f"({len(by_id) - len(ranked)} have no scored steps)"
        )
    return CurationResult(
        "trajectory", method, n, str(budget), [t for _, t in ranked[:n]], dataset_hash(ds),
        dict(score_ref or {}), _tie_log(ranked, n),
    )


def select_top_steps(
    steps: Sequence[StepScore],
    n_steps: int,
    ds: Dataset,
    method: str = "qoq-step",
    score_ref: dict | None = None,
) -> CurationResult:
    """Keep the ``n_steps`` best individual steps by (score desc, traj_id, step_idx)."""
    lengths = {t.id: len(t) for t in ds}
    for st in steps:
        if st.traj_id not in lengths or not 0 <= st.step_idx < lengths[st.traj_id]:
            raise CurationError(f"step score ({st.traj_id}, {st.step_idx}) is not in the dataset")
    _check_scores(st.score for st in steps)
    if not 1 <= n_steps <= len(steps):
        raise CurationError(f"step budget {n_steps} outside [1, {len(steps)}] scored steps")
    ranked = sorted(((st.score, (st.traj_id, st.step_idx)) for st in steps), key=lambda x: (-x[0], x[1]))
    if len({k for _, k in ranked}) != len(ranked):
        raise CurationError("duplicate step scores")
    return CurationResult(
        "step", method, n_steps, f"steps:{n_steps}", [k for _, k in ranked[:n_steps]], dataset_hash(ds),
        dict(score_ref or {}), _tie_log(ranked, n_steps),
    )


def _segments(idx: Sequence[int]) -> list[list[int]]:
    """Maximal runs of consecutive indices as [start, end) pairs."""
    out = []
    for i in idx:
        if out and out[-1][1] == i:
            out[-1][1] = i + 1
        else:
            out.append([i, i + 1])
    return out


def materialize(result: CurationResult, ds: Dataset) -> Dataset:
    """Build the curated dataset; ids, labels and metadata are preserved.

    Step-level selections become one fragment per source trajectory holding its
    selected steps in order; ``meta["fragment"]`` records the source step indices and
    the contiguous segments they form.
    """
    if result.dataset_hash != dataset_hash(ds):
        raise CurationError("curation result refers to a different dataset (stale dataset hash)")
    by_id = ds.by_id()
    if result.level == "trajectory":
        keep = set(result.selected)
        return Dataset(ds.d_s, ds.d_a, [t for t in ds if t.id in keep])
    chosen: dict[int, list[int]] = {}
    for tid, sidx in result.selected:
        chosen.setdefault(tid, []).append(sidx)
    frags = []
    for tid in sorted(chosen):
        src = by_id[tid]
        idx = sorted(chosen[tid])
        meta = dict(src.meta)
        meta["fragment"] = {"source_len": len(src), "steps": idx, "segments": _segments(idx)}
        frags.append(Trajectory(tid, src.states[idx], src.actions[idx], src.label, meta))
    return Dataset(ds.d_s, ds.d_a, frags)


def trajectory_step_budget(result: CurationResult, ds: Dataset) -> int:
    """Total steps of a trajectory-level selection (for matched step-mode ablations)."""
    if result.level != "trajectory":
        raise CurationError("need a trajectory-level result")
    lengths = {t.id: len(t) for t in ds}
    return int(np.sum([lengths[t] for t in result.selected]))
