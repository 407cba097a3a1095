"""Trajectory datasets and their canonical JSONL serialization.

A dataset file starts with a header line::

    {"format":"qoq-traj","version":1,"d_s":7,"d_a":3}

followed by one JSON object per trajectory::

    {"id":0,"label":"success","meta":{...},"steps":[{"s":[...],"a":[...]},...]}

Floats are written with ``repr`` (shortest round-trip decimal), keys in a fixed
order and meta keys sorted, so two writes of the same dataset are byte-identical
and ``load_dataset`` inverts ``write_dataset`` exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, NamedTuple

import numpy as np

FORMAT_NAME = "qoq-traj"
FORMAT_VERSION = 1
LABELS = ("success", "failure", None)


class DatasetError(ValueError):
    """Raised for malformed or inconsistent trajectory data."""


class ParseError(DatasetError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class SchemaError(DatasetError):
    pass


class Step(NamedTuple):
    state: np.ndarray
    action: np.ndarray


@dataclass(eq=False)
class Trajectory:
    """One demonstration.

    Attributes:
        id: Non-negative id, unique within a dataset.
        states: Array of shape (T, d_s).
        actions: Array of shape (T, d_a).
        label: "success", "failure" or None (unlabeled).
        meta: Free-form JSON-serializable metadata.
    """

    id: int
    states: np.ndarray
    actions: np.ndarray
    label: str | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.array(self.states, dtype=np.float64, ndmin=2)
        self.actions = np.array(self.actions, dtype=np.float64, ndmin=2)
        if isinstance(self.id, bool) or not isinstance(self.id, (int, np.integer)) or self.id < 0:
            raise SchemaError(f"trajectory id must be a non-negative integer, got {self.id!r}")
        self.id = int(self.id)
        if self.label not in LABELS:
            raise SchemaError(f"trajectory {self.id}: invalid label {self.label!r}")
        if len(self.states) == 0:
            raise SchemaError(f"trajectory {self.id}: no steps")
        if len(self.states) != len(self.actions):
            raise SchemaError(
                f"trajectory {self.id}: {len(self.states)} states but {len(self.actions)} actions"
            )
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.actions))):
            raise SchemaError(f"trajectory {self.id}: non-finite state or action values")

    def __len__(self) -> int:
        return len(self.states)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.meta == other.meta
            and self.states.shape == other.states.shape
            and self.actions.shape == other.actions.shape
            and bool(np.array_equal(self.states, other.states))
            and bool(np.array_equal(self.actions, other.actions))
        )

    @property
    def steps(self) -> list[Step]:
        return [Step(s, a) for s, a in zip(self.states, self.actions)]

    @property
    def d_s(self) -> int:
        return self.states.shape[1]

    @property
    def d_a(self) -> int:
        return self.actions.shape[1]


@dataclass(eq=False)
class Dataset:
    d_s: int
    d_a: int
    trajectories: list[Trajectory] = field(default_factory=list)

    def __post_init__(self):
        if self.d_s < 1 or self.d_a < 1:
            raise SchemaError(f"dimensions must be positive, got d_s={self.d_s}, d_a={self.d_a}")
        seen = set()
        for traj in self.trajectories:
            if traj.id in seen:
                raise SchemaError(f"duplicate trajectory id {traj.id}")
            seen.add(traj.id)
            if traj.d_s != self.d_s or traj.d_a != self.d_a:
                raise SchemaError(
                    f"trajectory {traj.id}: dims ({traj.d_s},{traj.d_a}) "
                    f"do not match dataset ({self.d_s},{self.d_a})"
                )

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.d_s == other.d_s
            and self.d_a == other.d_a
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.trajectories, other.trajectories))
        )

    @property
    def ids(self) -> list[int]:
        return [t.id for t in self.trajectories]

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def by_id(self) -> dict[int, Trajectory]:
        return {t.id: t for t in self.trajectories}

    def canonical_pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All (s, a) pairs ordered by trajectory id then step index.

        Returns (states, actions, keys) where keys[i] = (traj_id, step_idx).
        """
        trajs = sorted(self.trajectories, key=lambda t: t.id)
        if not trajs:
            return (np.zeros((0, self.d_s)), np.zeros((0, self.d_a)), np.zeros((0, 2), dtype=np.int64))
        states = np.concatenate([t.states for t in trajs])
        actions = np.concatenate([t.actions for t in trajs])
        keys = np.concatenate(
            [np.stack([np.full(len(t), t.id), np.arange(len(t))], axis=1) for t in trajs]
        ).astype(np.int64)
        return states, actions, keys

    def validate_nonempty(self) -> None:
        if self.n_steps == 0:
            raise SchemaError("dataset contains no steps")


def _floats(values: Iterable[float]) -> str:
    return "[" + ",".join(repr(float(v)) for v in values) + "]"


def _traj_line(traj: Trajectory) -> str:
    label = json.dumps(traj.label)
    meta = json.dumps(traj.meta, sort_keys=True, separators=(",", ":"), allow_nan=False)
    steps = ",".join(
        '{"s":' + _floats(s) + ',"a":' + _floats(a) + "}" for s, a in zip(traj.states, traj.actions)
    )
    return f'{{"id":{traj.id},"label":{label},"meta":{meta},"steps":[{steps}]}}'


def dumps_dataset(ds: Dataset) -> str:
    header = (
        f'{{"format":"{FORMAT_NAME}","version":{FORMAT_VERSION},"d_s":{ds.d_s},"d_a":{ds.d_a}}}'
    )
    lines = [header] + [_traj_line(t) for t in ds.trajectories]
    return "\n".join(lines) + "\n"


def dataset_hash(ds: Dataset) -> str:
    return hashlib.sha256(dumps_dataset(ds).encode("utf-8")).hexdigest()


def write_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(dumps_dataset(ds))
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


def _vector(value: Any, dim: int, what: str, traj_id: int, line_no: int) -> list[float]:
    if not isinstance(value, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        raise ParseError(line_no, f"trajectory {traj_id}: {what} must be a list of numbers")
    if len(value) != dim:
        raise SchemaError(
            f"line {line_no}: trajectory {traj_id}: {what} has dimension {len(value)}, expected {dim}"
        )
    if not all(math.isfinite(v) for v in value):
        raise SchemaError(f"line {line_no}: trajectory {traj_id}: non-finite {what} value")
    return [float(v) for v in value]


def loads_dataset(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(1, "missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(1, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ParseError(1, f"header must declare format {FORMAT_NAME!r}")
    if header.get("version") != FORMAT_VERSION:
        raise ParseError(1, f"unsupported version {header.get('version')!r}")
    d_s, d_a = header.get("d_s"), header.get("d_a")
    if not (isinstance(d_s, int) and isinstance(d_a, int)) or d_s < 1 or d_a < 1:
        raise SchemaError("header d_s and d_a must be positive integers")

    trajectories = []
    seen: set[int] = set()
    for line_no, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict) or set(obj) != {"id", "label", "meta", "steps"}:
            raise ParseError(line_no, "trajectory record must have keys id, label, meta, steps")
        tid = obj["id"]
        if isinstance(tid, bool) or not isinstance(tid, int) or tid < 0:
            raise ParseError(line_no, f"invalid trajectory id {tid!r}")
        if tid in seen:
            raise SchemaError(f"line {line_no}: duplicate trajectory id {tid}")
        seen.add(tid)
        steps = obj["steps"]
        if not isinstance(steps, list) or not steps:
            raise SchemaError(f"line {line_no}: trajectory {tid}: no steps")
        if not isinstance(obj["meta"], dict):
            raise ParseError(line_no, f"trajectory {tid}: meta must be an object")
        states, actions = [], []
        for step in steps:
            if not isinstance(step, dict) or set(step) != {"s", "a"}:
                raise ParseError(line_no, f"trajectory {tid}: step must have keys s, a")
            states.append(_vector(step["s"], d_s, "state", tid, line_no))
            actions.append(_vector(step["a"], d_a, "action", tid, line_no))
        try:
            trajectories.append(Trajectory(tid, np.array(states), np.array(actions), obj["label"], obj["meta"]))
        except SchemaError as exc:
            raise SchemaError(f"line {line_no}: {exc}") from None
    return Dataset(d_s, d_a, trajectories)


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return loads_dataset(fh.read())


def split_by_ids(ds: Dataset, ids: Iterable[int]) -> tuple[Dataset, Dataset]:
    """Partition ``ds`` into (trajectories in ``ids``, the rest), keeping file order."""
    wanted = set(int(i) for i in ids)
    missing = wanted - set(ds.ids)
    if missing:
        raise KeyError(f"unknown trajectory ids: {sorted(missing)}")
    inside = [t for t in ds.trajectories if t.id in wanted]
    outside = [t for t in ds.trajectories if t.id not in wanted]
    return Dataset(ds.d_s, ds.d_a, inside), Dataset(ds.d_s, ds.d_a, outside)


def concat_datasets(*parts: Dataset) -> Dataset:
    """Concatenate datasets with identical dimensions (ids must stay unique)."""
    first = parts[0]
    return Dataset(first.d_s, first.d_a, [t for p in parts for t in p.trajectories])


def filter_steps(ds: Dataset, ids: Iterable[int] | None = None, step_range: tuple[int, int | None] | None = None) -> Dataset:
    """Keep trajectories in ``ids`` (all if None), each trimmed to ``states[start:end]``.

    Trajectories left without steps are dropped.
    """
    keep = None if ids is None else set(int(i) for i in ids)
    if keep is not None:
        missing = keep - set(ds.ids)
        if missing:
            raise KeyError(f"unknown trajectory ids: {sorted(missing)}")
    start, end = step_range if step_range is not None else (0, None)
    out = []
    for t in ds:
        if keep is not None and t.id not in keep:
            continue
        s, a = t.states[start:end], t.actions[start:end]
        if len(s):
            out.append(Trajectory(t.id, s, a, t.label, dict(t.meta)))
    return Dataset(ds.d_s, ds.d_a, out)
