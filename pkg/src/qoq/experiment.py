"""End-to-end planted-failure experiment: generate, train, score, curate, retrain, evaluate.

Each seed runs the same ordered pipeline. The report carries a hash chain (dataset,
checkpoint, gradient caches, scores) per seed so every number can be traced back to
its inputs, plus mean and standard error across seeds for every metric.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import sim
from .baselines import random_select, retrieval_select, train_autoencoder
from .curation import BudgetPolicy, CurationResult, materialize, select_top_steps, select_top_trajectories, trajectory_step_budget
from .data import Dataset, concat_datasets, dataset_hash, split_by_ids
from .grads import GradCache, OporpConfig, build_grad_cache
from .metrics import curation_accuracy, mean_stderr
from .policy import PolicyParams, check_mask, params_hash
from .scoring import SCORE_MODES, ScoreTable, score_caches
from .training import TrainConfig, train_bc

REPORT_VERSION = 1
EVAL_SEED_OFFSET = 10_000


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, seed: int, msg: str):
        super().__init__(f"stage {stage} failed for seed {seed}: {msg}")
        self.stage = stage
        self.seed = seed


@dataclass(frozen=True)
class DataSection:
    n_success: int = 60
    n_fail: int = 40
    fail_modes: tuple[str, ...] = ("grasp_miss", "wrong_goal")
    n_val: int = 10
    seed_stride: int = 1000


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3


@dataclass(frozen=True)
class GradSection:
    layers: str = "all"
    sketch_dim: int | None = 1024
    renormalize: bool = True


@dataclass(frozen=True)
class CurateSection:
    mode: str = "max"
    budget: str = "fixed:60"


@dataclass(frozen=True)
class EvalSection:
    episodes: int = 50
    baselines: tuple[str, ...] = ("random", "retrieval")
    baseline_success: bool = True
    ae_epochs: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "planted"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    workers: int = 1
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    grads: GradSection = field(default_factory=GradSection)
    curate: CurateSection = field(default_factory=CurateSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if not self.seeds or len(set(self.seeds)) != len(self.seeds) or min(self.seeds) < 0:
            raise ConfigError("seeds must be a non-empty list of distinct non-negative integers")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        bad = set(self.data.fail_modes) - set(sim.FAIL_MODES)
        if bad:
            raise ConfigError(f"unknown fail modes {sorted(bad)}")
        check_mask(self.grads.layers)
        if self.curate.mode not in SCORE_MODES:
            raise ConfigError(f"unknown score mode {self.curate.mode!r}")
        BudgetPolicy.parse(self.curate.budget)
        bad = set(self.eval.baselines) - {"random", "retrieval"}
        if bad:
            raise ConfigError(f"unknown baselines {sorted(bad)}")

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.train.epochs, self.train.batch_size, self.train.lr)

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


def _build(cls, obj: Any, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(obj) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in obj.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{name}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(obj: dict | str | Path) -> ExperimentConfig:
    """Parse a JSON config (dict or path); unknown keys anywhere are rejected."""
    if not isinstance(obj, dict):
        obj = json.loads(Path(obj).read_text())
    return _build(ExperimentConfig, obj, "config")


def planted_split(data: DataSection, seed: int) -> tuple[Dataset, Dataset]:
    """Generate the planted dataset and hold out ``n_val`` expert demos for validation."""
    full = sim.generate_dataset(data.n_success + data.n_val, data.n_fail, list(data.fail_modes), seed * data.seed_stride)
    experts = sorted(t.id for t in full if t.meta["mode"] == "expert")
    val_ids = np.random.default_rng(seed).choice(experts, size=data.n_val, replace=False)
    val, train = split_by_ids(full, val_ids.tolist())
    return train, val


def score_digest(table: ScoreTable) -> str:
    rows = [[t.traj_id, repr(t.score), t.n_steps_scored] for t in table.trajectories]
    return hashlib.sha256(json.dumps({"mode": table.mode, "trajectories": rows}).encode()).hexdigest()


@dataclass
class SeedArtifacts:
    """Intermediate products of one seed, reused by ablations."""

    seed: int
    train: Dataset
    val: Dataset
    policy: PolicyParams
    train_cache: GradCache
    val_cache: GradCache


def _stage(name: str, seed: int, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, seed, f"{type(exc).__name__}: {exc}") from exc


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedArtifacts:
    train, val = _stage("gen-data", seed, planted_split, cfg.data, seed)
    tc = TrainConfig(cfg.train.epochs, cfg.train.batch_size, cfg.train.lr, seed=seed)
    policy, _ = _stage("train", seed, train_bc, train, sim.policy_arch(), tc)
    dim = policy.arch.group_size(cfg.grads.layers)
    sketch = None if cfg.grads.sketch_dim is None else OporpConfig(dim, cfg.grads.sketch_dim, seed)
    caches = [
        _stage("grads", seed, build_grad_cache, policy, ds, cfg.grads.layers, sketch, cfg.grads.renormalize)
        for ds in (train, val)
    ]
    return SeedArtifacts(seed, train, val, policy, *caches)


def retrain_and_evaluate(cfg: ExperimentConfig, ds: Dataset, seed: int) -> float:
    tc = TrainConfig(cfg.train.epochs, cfg.train.batch_size, cfg.train.lr, seed=seed)
    policy, _ = train_bc(ds, sim.policy_arch(), tc)
    return sim.evaluate_policy(policy, cfg.eval.episodes, EVAL_SEED_OFFSET + seed)


def run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    art = prepare_seed(cfg, seed)
    table = _stage("score", seed, score_caches, art.train_cache, art.val_cache, cfg.curate.mode)
    budget = BudgetPolicy.parse(cfg.curate.budget)
    result = _stage("curate", seed, select_top_trajectories, table.trajectories, budget, art.train,
                    "qoq", {"scores": score_digest(table)})
    methods: dict[str, CurationResult] = {"qoq": result}
    if "random" in cfg.eval.baselines:
        methods["random"] = _stage("baseline", seed, random_select, art.train, budget, seed)
    if "retrieval" in cfg.eval.baselines:
        ae_cfg = TrainConfig(cfg.eval.ae_epochs, cfg.train.batch_size, cfg.train.lr, seed=seed)
        ae, _ = _stage("baseline", seed, train_autoencoder, concat_datasets(art.train, art.val), ae_cfg)
        methods["retrieval"] = _stage("baseline", seed, retrieval_select, art.train, art.val, ae, budget)
    accuracy = {m: curation_accuracy(r, art.train).accuracy for m, r in methods.items()}
    success = {"all": _stage("eval", seed, sim.evaluate_policy, art.policy, cfg.eval.episodes, EVAL_SEED_OFFSET + seed)}
    for m, r in methods.items():
        if m == "qoq" or cfg.eval.baseline_success:
            success[m] = _stage("eval", seed, retrain_and_evaluate, cfg, materialize(r, art.train), seed)
    return {
        "seed": seed,
        "budget": result.budget,
        "n_train": len(art.train),
        "n_val": len(art.val),
        "accuracy": accuracy,
        "success_rate": success,
        "selected": {m: r.selected for m, r in methods.items()},
        "hashes": {
            "dataset": dataset_hash(art.train),
            "validation": dataset_hash(art.val),
            "checkpoint": params_hash(art.policy).hex(),
            "train_cache": art.train_cache.digest(),
            "val_cache": art.val_cache.digest(),
            "scores": score_digest(table),
            "curation": result.dataset_hash,
        },
    }


def _summary(rows: list[dict], key: str) -> dict:
    out = {}
    for m in rows[0][key]:
        mean, se = mean_stderr([r[key][m] for r in rows])
        out[m] = {"mean": mean, "stderr": se}
    return out


def run_experiment(cfg: ExperimentConfig | dict, workers: int | None = None) -> dict:
    """Run every seed and assemble the report (ordered by seed list position)."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = load_config(cfg)
    workers = workers or cfg.workers
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cfg.seeds))) as pool:
            rows = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        rows = [run_seed(cfg, s) for s in cfg.seeds]
    return {
        "version": REPORT_VERSION,
        "name": cfg.name,
        "config": cfg.to_json(),
        "config_hash": cfg.digest(),
        "seeds": rows,
        "summary": {"accuracy": _summary(rows, "accuracy"), "success_rate": _summary(rows, "success_rate")},
    }


def write_report(report: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = ["seed,metric,method,value"]
    for row in report["seeds"]:
        for metric in ("accuracy", "success_rate"):
            for m, v in sorted(row[metric].items()):
                lines.append(f"{row['seed']},{metric},{m},{v!r}")
    (out_dir / "report.csv").write_text("\n".join(lines) + "\n")
    return path


_STAT = {"type": "object", "required": ["mean", "stderr"],
         "properties": {"mean": {"type": "number"}, "stderr": {"type": "number", "minimum": 0}}}
_FRACTIONS = {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}}
_HEX64 = {"type": "string", "pattern": "^[0-9a-f]{64}$"}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "name", "config", "config_hash", "seeds", "summary"],
    "properties": {
        "version": {"const": REPORT_VERSION},
        "name": {"type": "string"},
        "config": {"type": "object"},
        "config_hash": _HEX64,
        "seeds": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["seed", "budget", "n_train", "n_val", "accuracy", "success_rate", "selected", "hashes"],
                "properties": {
                    "seed": {"type": "integer", "minimum": 0},
                    "budget": {"type": "integer", "minimum": 1},
                    "n_train": {"type": "integer"},
                    "n_val": {"type": "integer"},
                    "accuracy": _FRACTIONS,
                    "success_rate": _FRACTIONS,
                    "selected": {"type": "object", "additionalProperties": {"type": "array"}},
                    "hashes": {
                        "type": "object",
                        "required": ["dataset", "validation", "checkpoint", "train_cache", "val_cache", "scores", "curation"],
                        "additionalProperties": _HEX64,
                    },
                },
            },
        },
        "summary": {
            "type": "object",
            "required": ["accuracy", "success_rate"],
            "additionalProperties": {"type": "object", "additionalProperties": _STAT},
        },
    },
}


def step_ablation(cfg: ExperimentConfig, art: SeedArtifacts, traj_result: CurationResult) -> dict:
    """Step-mode selection at the step budget of a trajectory-mode selection."""
    table = score_caches(art.train_cache, art.val_cache, cfg.curate.mode)
    n_steps = trajectory_step_budget(traj_result, art.train)
    step_result = select_top_steps(table.steps, n_steps, art.train)
    return {
        "n_steps": n_steps,
        "traj_coverage": len(traj_result.traj_ids),
        "step_coverage": len(step_result.traj_ids),
        "step_result": step_result,
    }
