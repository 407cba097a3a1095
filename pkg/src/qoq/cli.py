"""Command-line front end: one subcommand per pipeline stage.

Exit codes: 0 success, 1 runtime error (one ``ERROR(<stage>): ...`` line on stderr),
2 usage error. Seed flags fall back to the ``QOQ_SEED`` environment variable, then 0.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import sim
from .baselines import Autoencoder, random_select, retrieval_select, train_autoencoder
from .curation import BudgetPolicy, CurationResult, materialize, select_top_steps, select_top_trajectories, trajectory_step_budget
from .data import Dataset, concat_datasets, filter_steps, load_dataset, write_dataset
from .experiment import REPORT_SCHEMA, load_config, run_experiment, write_report
from .grads import GradCache, OporpConfig, build_grad_cache
from .metrics import consistency, curation_accuracy
from .policy import MASKS, load_checkpoint
from .scoring import SCORE_MODES, WEIGHTINGS, ScoreTable, rollout_weighted_scores, score_caches
from .training import TrainConfig, train_bc


class UsageError(Exception):
    pass


def _seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("QOQ_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"QOQ_SEED must be an integer, got {env!r}") from None


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _step_range(text: str | None):
    if text is None:
        return None
    try:
        lo, hi = text.split(":")
        return int(lo or 0), (int(hi) if hi else None)
    except ValueError:
        raise UsageError(f"--step-range must look like START:END, got {text!r}") from None


def _ids(text: str | None):
    if text is None:
        return None
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise UsageError(f"--ids must be comma-separated integers, got {text!r}") from None


def cmd_gen_data(a):
    modes = [m for m in a.fail_modes.split(",") if m]
    ds = sim.generate_dataset(a.n_success, a.n_fail, modes, _seed(a.seed))
    write_dataset(ds, a.out)
    _emit({"out": a.out, "trajectories": len(ds), "success": sum(t.label == "success" for t in ds)})


def cmd_train(a):
    ds = load_dataset(a.data)
    cfg = TrainConfig(a.epochs, a.batch, a.lr, seed=_seed(a.seed))
    _, report = train_bc(ds, sim.policy_arch(), cfg, a.out)
    if a.report:
        report.save(a.report)
    _emit({"out": a.out, "final_loss": report.epoch_losses[-1], "optimizer_steps": report.n_optimizer_steps})


def cmd_grads(a):
    policy = load_checkpoint(a.policy)
    ds = filter_steps(load_dataset(a.data), _ids(a.ids), _step_range(a.step_range))
    dim = policy.arch.group_size(a.layers)
    cfg = None if a.sketch_dim == 0 else OporpConfig(dim, a.sketch_dim, _seed(a.oporp_seed))
    cache = build_grad_cache(policy, ds, a.layers, cfg, not a.no_renormalize)
    cache.save(a.out)
    _emit({"out": a.out, "records": len(cache), "skipped": len(cache.skipped), "sketch_dim": cache.sketch_dim})


def cmd_score(a):
    if a.score_cmd == "rollout":
        train = GradCache.load(a.train_grads)
        pos = GradCache.load(a.pos) if a.pos else None
        neg = GradCache.load(a.neg) if a.neg else None
        trajs = rollout_weighted_scores(train, pos, neg, a.weighting)
        table = ScoreTable("rollout", [], trajs, {"weighting": a.weighting, "train_cache": train.digest()})
    else:
        if not (a.train_grads and a.val_grads):
            raise UsageError("score needs --train-grads and --val-grads")
        table = score_caches(GradCache.load(a.train_grads), GradCache.load(a.val_grads), a.mode)
    table.save(a.out)
    _emit({"out": a.out, "mode": table.mode, "trajectories": len(table.trajectories), "steps": len(table.steps)})


def cmd_curate(a):
    table = ScoreTable.load(a.scores)
    ds = load_dataset(a.data)
    budget = BudgetPolicy.parse(a.budget)
    ref = {"scores_dir": str(a.scores), **{k: v for k, v in table.meta.items() if k.endswith("cache")}}
    traj_result = select_top_trajectories(table.trajectories, budget, ds, "qoq", ref)
    if a.level == "traj":
        result = traj_result
    else:
        if not table.steps:
            raise UsageError("step-level curation needs step scores (steps.csv)")
        n = a.n_steps if a.n_steps is not None else trajectory_step_budget(traj_result, ds)
        result = select_top_steps(table.steps, n, ds, "qoq-step", ref)
    result.save(a.out)
    if a.dataset_out:
        write_dataset(materialize(result, ds), a.dataset_out)
    _emit({"out": a.out, "level": result.level, "budget": result.budget, "trajectories": len(result.traj_ids)})


def cmd_rollout(a):
    policy = load_checkpoint(a.policy)
    ds = sim.rollout_dataset(policy, a.episodes, _seed(a.seed), a.label_by_outcome, not a.deterministic)
    write_dataset(ds, a.out)
    _emit({"out": a.out, "episodes": len(ds), "success": sum(t.label == "success" for t in ds)})


def _disjoint_ids(ds: Dataset, other: Dataset) -> Dataset:
    """Shift ``ds`` ids past ``other``'s when they collide (autoencoder training only)."""
    if not set(ds.ids) & set(other.ids):
        return ds
    off = max(other.ids) + 1 - min(ds.ids)
    return Dataset(ds.d_s, ds.d_a, [replace(t, id=t.id + off) for t in ds])


def cmd_baseline(a):
    ds = load_dataset(a.data)
    budget = BudgetPolicy.parse(a.budget)
    seed = _seed(a.seed)
    if a.method == "random":
        result = random_select(ds, budget, seed)
    else:
        if not a.val:
            raise UsageError("retrieval needs --val")
        val = load_dataset(a.val)
        ae, _ = train_autoencoder(concat_datasets(ds, _disjoint_ids(val, ds)), TrainConfig(a.ae_epochs, 64, 1e-3, seed=seed))
        if a.ae_out:
            ae.save(a.ae_out)
        result = retrieval_select(ds, val, ae, budget)
    result.save(a.out)
    if a.dataset_out:
        write_dataset(materialize(result, ds), a.dataset_out)
    _emit({"out": a.out, "method": result.method, "budget": result.budget})


def cmd_eval(a):
    if a.eval_cmd == "accuracy":
        rep = curation_accuracy(CurationResult.load(a.curation), load_dataset(a.data))
        out = rep.to_json()
    elif a.eval_cmd == "success":
        policy = load_checkpoint(a.policy)
        out = {"success_rate": sim.evaluate_policy(policy, a.episodes, _seed(a.seed)), "episodes": a.episodes}
    else:
        if len(a.scores) < 2:
            raise UsageError("consistency needs at least two score directories")
        out = consistency(a.method, [ScoreTable.load(d).trajectories for d in a.scores]).to_json()
    if a.out:
        Path(a.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    _emit(out)


def cmd_experiment(a):
    cfg = load_config(a.config)
    report = run_experiment(cfg, a.workers)
    path = write_report(report, a.out)
    _emit({"out": str(path), "summary": report["summary"]})


def cmd_schema(a):
    print(json.dumps(REPORT_SCHEMA, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qoq", description="Influence-based curation of demonstration datasets.")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a scripted PointBin dataset")
    g.add_argument("--n-success", type=int, required=True, help="number of expert demos")
    g.add_argument("--n-fail", type=int, required=True, help="number of failure-mode demos")
    g.add_argument("--fail-modes", default="grasp_miss,wrong_goal", help="comma-separated failure modes")
    g.add_argument("--seed", type=int, help="generator seed (default: $QOQ_SEED or 0)")
    g.add_argument("--out", required=True, help="output JSONL path")
    g.set_defaults(fn=cmd_gen_data, stage="gen-data")

    t = sub.add_parser("train", help="behavior-clone a Gaussian MLP policy")
    t.add_argument("--data", required=True, help="training dataset JSONL")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--batch", type=int, default=64, help="minibatch size")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, help="init and shuffle seed (default: $QOQ_SEED or 0)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--report", help="optional training report JSON path")
    t.set_defaults(fn=cmd_train, stage="train")

    c = sub.add_parser("grads", help="cache normalized (sketched) per-step gradients")
    c.add_argument("--policy", required=True, help="policy checkpoint")
    c.add_argument("--data", required=True, help="dataset JSONL")
    c.add_argument("--layers", choices=MASKS, default="all", help="parameter group")
    c.add_argument("--sketch-dim", type=int, default=1024, help="OPORP sketch size K (0 = exact)")
    c.add_argument("--oporp-seed", type=int, help="sketch seed (default: $QOQ_SEED or 0)")
    c.add_argument("--ids", help="only these comma-separated trajectory ids")
    c.add_argument("--step-range", help="trim every trajectory to steps START:END")
    c.add_argument("--no-renormalize", action="store_true", help="skip renormalizing after sketching")
    c.add_argument("--out", required=True, help="cache path")
    c.set_defaults(fn=cmd_grads, stage="grads")

    s = sub.add_parser("score", help="score training steps against a validation cache")
    s.add_argument("--train-grads", help="training gradient cache")
    s.add_argument("--val-grads", help="validation gradient cache")
    s.add_argument("--mode", choices=SCORE_MODES, default="max")
    s.add_argument("--out", help="output directory")
    s_sub = s.add_subparsers(dest="score_cmd")
    r = s_sub.add_parser("rollout", help="combine success and failure rollout validation caches")
    r.add_argument("--train-grads", required=True)
    r.add_argument("--pos", help="success-rollout gradient cache")
    r.add_argument("--neg", help="failure-rollout gradient cache")
    r.add_argument("--weighting", choices=WEIGHTINGS, default="steps")
    r.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_score, stage="score", score_cmd=None)

    u = sub.add_parser("curate", help="select trajectories (or steps) under a budget")
    u.add_argument("--scores", required=True, help="score directory")
    u.add_argument("--data", required=True, help="dataset the scores refer to")
    u.add_argument("--budget", default="match-success", help="fixed:N | match-success | half")
    u.add_argument("--level", choices=("traj", "step"), default="traj")
    u.add_argument("--n-steps", type=int, help="step budget (default: steps of the trajectory selection)")
    u.add_argument("--out", required=True, help="curation result JSON")
    u.add_argument("--dataset-out", help="also write the curated dataset JSONL")
    u.set_defaults(fn=cmd_curate, stage="curate")

    o = sub.add_parser("rollout", help="turn policy rollouts into a dataset")
    o.add_argument("--policy", required=True)
    o.add_argument("--episodes", type=int, required=True)
    o.add_argument("--seed", type=int, help="start-state seed (default: $QOQ_SEED or 0)")
    o.add_argument("--label-by-outcome", action="store_true", help="label success/failure from the outcome")
    o.add_argument("--deterministic", action="store_true", help="execute the policy mean instead of sampling")
    o.add_argument("--out", required=True)
    o.set_defaults(fn=cmd_rollout, stage="rollout")

    b = sub.add_parser("baseline", help="random or latent-retrieval curation")
    b.add_argument("--method", choices=("random", "retrieval"), required=True)
    b.add_argument("--data", required=True, help="training dataset")
    b.add_argument("--val", help="validation dataset (retrieval)")
    b.add_argument("--budget", default="match-success")
    b.add_argument("--seed", type=int, help="sampling / autoencoder seed (default: $QOQ_SEED or 0)")
    b.add_argument("--ae-epochs", type=int, default=100)
    b.add_argument("--ae-out", help="save the trained autoencoder")
    b.add_argument("--out", required=True)
    b.add_argument("--dataset-out")
    b.set_defaults(fn=cmd_baseline, stage="baseline")

    e = sub.add_parser("eval", help="accuracy, success rate or ranking consistency")
    e_sub = e.add_subparsers(dest="eval_cmd", required=True)
    ea = e_sub.add_parser("accuracy")
    ea.add_argument("--curation", required=True)
    ea.add_argument("--data", required=True)
    es = e_sub.add_parser("success")
    es.add_argument("--policy", required=True)
    es.add_argument("--episodes", type=int, default=50)
    es.add_argument("--seed", type=int)
    ec = e_sub.add_parser("consistency")
    ec.add_argument("--scores", nargs="+", required=True, help="score directories, one per training seed")
    ec.add_argument("--method", default="qoq")
    for q in (ea, es, ec):
        q.add_argument("--out", help="optional JSON output path")
    e.set_defaults(fn=cmd_eval, stage="eval")

    x = sub.add_parser("experiment", help="run the end-to-end experiment from a JSON config")
    x.add_argument("--config", required=True)
    x.add_argument("--out", required=True, help="output directory")
    x.add_argument("--workers", type=int, help="parallel seeds (overrides the config)")
    x.set_defaults(fn=cmd_experiment, stage="experiment")

    sc = sub.add_parser("schema", help="print the experiment report JSON schema")
    sc.set_defaults(fn=cmd_schema, stage="schema")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.cmd == "score" and args.score_cmd is None and args.out is None:
        parser.error("score: --out is required")
    try:
        args.fn(args)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"ERROR({args.stage}): {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
