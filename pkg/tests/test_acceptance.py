"""Acceptance criteria on the PointBin planted-failure benchmark.

Each test prints one ``[PASS]``/``[FAIL]`` line (also collected into the terminal
summary). Thresholds are the contract values; none are relaxed here.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from qoq import sim
from qoq.baselines import random_select, retrieval_select, retrieval_step_scores, train_autoencoder
from qoq.curation import materialize, select_top_trajectories
from qoq.data import concat_datasets, split_by_ids
from qoq.experiment import (
    EVAL_SEED_OFFSET, DataSection, ExperimentConfig, planted_split, prepare_seed, retrain_and_evaluate, step_ablation,
)
from qoq.grads import OporpConfig, build_grad_cache
from qoq.metrics import consistency, curation_accuracy
from qoq.policy import flatten, grad_log_prob, log_prob, unflatten
from qoq.scoring import aggregate_by_ids, rollout_weighted_scores, score_caches
from qoq.training import TrainConfig, train_bc

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
BUDGET = 60
MAX_POS_ROLLOUTS = 5
N_ROLLOUTS = 20
CONSISTENCY_SEEDS = (0, 1, 2)
ROOT = Path(__file__).resolve().parent.parent


def report(request, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(line)
    request.getfixturevalue("acceptance_log").append(line)


def _accuracy(table_or_scores, ds) -> float:
    scores = getattr(table_or_scores, "trajectories", table_or_scores)
    return curation_accuracy(select_top_trajectories(scores, BUDGET, ds), ds).accuracy


def _seed_run(cfg: ExperimentConfig, seed: int) -> dict:
    t0 = time.perf_counter()
    art = prepare_seed(cfg, seed)
    tmax = score_caches(art.train_cache, art.val_cache, "max")
    rmax = select_top_trajectories(tmax.trajectories, BUDGET, art.train)
    rand = random_select(art.train, BUDGET, seed)
    ae, _ = train_autoencoder(concat_datasets(art.train, art.val),
                              TrainConfig(cfg.eval.ae_epochs, cfg.train.batch_size, cfg.train.lr, seed=seed))
    retr = retrieval_select(art.train, art.val, ae, BUDGET)
    sr_all = sim.evaluate_policy(art.policy, cfg.eval.episodes, EVAL_SEED_OFFSET + seed)
    sr_qoq = retrain_and_evaluate(cfg, materialize(rmax, art.train), seed)
    pipeline_s = time.perf_counter() - t0

    tmean = score_caches(art.train_cache, art.val_cache, "mean")
    abl = step_ablation(cfg, art, rmax)
    sr_step = retrain_and_evaluate(cfg, materialize(abl["step_result"], art.train), seed)

    dim = art.policy.arch.group_size("all")
    exact = [build_grad_cache(art.policy, ds, "all", None) for ds in (art.train, art.val)]
    tex = score_caches(*exact, "max")
    rex = select_top_trajectories(tex.trajectories, BUDGET, art.train)
    full = OporpConfig(dim, dim, seed)
    tfull = score_caches(*[build_grad_cache(art.policy, ds, "all", full) for ds in (art.train, art.val)], "max")
    x = np.array([t.score for t in tex.trajectories])
    y = np.array([t.score for t in tmax.trajectories])

    rollouts = sim.rollout_dataset(art.policy, N_ROLLOUTS, 2 * EVAL_SEED_OFFSET + seed)
    succ = [t.id for t in rollouts if t.label == "success"]
    fail = [t.id for t in rollouts if t.label == "failure"]
    sketch = OporpConfig(dim, cfg.grads.sketch_dim, seed)
    pos = build_grad_cache(art.policy, split_by_ids(rollouts, succ[:MAX_POS_ROLLOUTS])[0], "all", sketch)
    neg = build_grad_cache(art.policy, split_by_ids(rollouts, fail)[0], "all", sketch) if fail else None
    rollout = {"n_pos": min(len(succ), MAX_POS_ROLLOUTS), "n_neg": len(fail),
               "success_only": _accuracy(score_caches(art.train_cache, pos, "max"), art.train)}
    for w in ("steps", "trajectories"):
        rollout[w] = _accuracy(rollout_weighted_scores(art.train_cache, pos, neg, w), art.train)

    return {
        "seed": seed,
        "pipeline_s": pipeline_s,
        "acc": {"max": curation_accuracy(rmax, art.train).accuracy, "mean": _accuracy(tmean, art.train),
                "random": curation_accuracy(rand, art.train).accuracy,
                "retrieval": curation_accuracy(retr, art.train).accuracy},
        "sr": {"all": sr_all, "qoq": sr_qoq, "step": sr_step},
        "coverage": {"traj": abl["traj_coverage"], "step": abl["step_coverage"], "n_steps": abl["n_steps"]},
        "oporp": {"pearson": float(np.corrcoef(x, y)[0, 1]), "overlap": len(set(rex.selected) & set(rmax.selected)),
                  "full_width_diff": max(abs(a.score - b.score) for a, b in zip(tfull.steps, tex.steps))},
        "rollout": rollout,
    }


@pytest.fixture(scope="module")
def runs():
    cfg = ExperimentConfig(seeds=SEEDS)
    return [_seed_run(cfg, s) for s in SEEDS]


def _fmt(values) -> str:
    return "[" + ", ".join(f"{v:.3f}" if isinstance(v, float) else str(v) for v in values) + "]"


def test_c1_planted_failure_curation(runs, request):
    acc = [r["acc"] for r in runs]
    mean_acc = float(np.mean([a["max"] for a in acc]))
    beats = all(a["max"] > a["random"] and a["max"] > a["retrieval"] for a in acc)
    runtime = sum(r["pipeline_s"] for r in runs)
    ok = mean_acc >= 0.90 and beats and runtime < 600
    report(request, "C1 planted-failure curation", ok,
           f"mean acc {mean_acc:.3f} (>= 0.90); qoq {_fmt([a['max'] for a in acc])} random {_fmt([a['random'] for a in acc])} "
           f"retrieval {_fmt([a['retrieval'] for a in acc])}; beats both every seed: {beats}; pipeline {runtime:.0f}s (< 600s)")
    assert ok


def test_c2_downstream_success(runs, request):
    gain = [r["sr"]["qoq"] - r["sr"]["all"] for r in runs]
    wins = sum(g >= 0 for g in gain)
    ok = wins >= 4 and float(np.mean(gain)) > 0
    report(request, "C2 downstream success", ok,
           f"qoq {_fmt([r['sr']['qoq'] for r in runs])} all {_fmt([r['sr']['all'] for r in runs])}; "
           f"qoq >= all on {wins}/5 (need 4); mean gain {np.mean(gain):+.3f} (> 0)")
    assert ok


def test_c3_max_vs_mean(runs, request):
    wins = sum(r["acc"]["mean"] <= r["acc"]["max"] for r in runs)
    ok = wins >= 4
    report(request, "C3 max-vs-mean ablation", ok,
           f"max {_fmt([r['acc']['max'] for r in runs])} mean {_fmt([r['acc']['mean'] for r in runs])}; "
           f"mean <= max on {wins}/5 (need 4)")
    assert ok


def test_c4_trajectory_vs_step(runs, request):
    fewer = all(r["coverage"]["step"] < r["coverage"]["traj"] for r in runs)
    wins = sum(r["sr"]["step"] <= r["sr"]["qoq"] for r in runs)
    ok = fewer and wins >= 4
    report(request, "C4 trajectory-vs-step ablation", ok,
           f"step budget {_fmt([r['coverage']['n_steps'] for r in runs])}; distinct trajectories traj "
           f"{_fmt([r['coverage']['traj'] for r in runs])} step {_fmt([r['coverage']['step'] for r in runs])} "
           f"(step < traj every seed: {fewer}); success traj {_fmt([r['sr']['qoq'] for r in runs])} "
           f"step {_fmt([r['sr']['step'] for r in runs])} (step <= traj on {wins}/5, need 4)")
    assert ok


def test_c5_oporp_fidelity(runs, request):
    o = [r["oporp"] for r in runs]
    ok = all(x["pearson"] >= 0.95 and x["overlap"] >= 54 and x["full_width_diff"] < 1e-5 for x in o)
    report(request, "C5 OPORP fidelity", ok,
           f"pearson {_fmt([x['pearson'] for x in o])} (>= 0.95); top-60 overlap {_fmt([x['overlap'] for x in o])} "
           f"(>= 54); K=D max abs diff {max(x['full_width_diff'] for x in o):.1e} (< 1e-5)")
    assert ok


def test_c6_gradient_correctness(request):
    t0 = time.perf_counter()
    ds = sim.generate_dataset(5, 5, ["grasp_miss", "wrong_goal"], 0)
    policy, _ = train_bc(ds, sim.policy_arch(), TrainConfig(epochs=5, seed=0))
    S, A, _ = ds.canonical_pairs()
    rng = np.random.default_rng(0)
    theta = flatten(policy)
    h = 1e-5
    errs = []
    for _ in range(100):
        i = int(rng.integers(len(S)))
        v = rng.normal(size=theta.shape)
        v /= np.linalg.norm(v)
        a = rng.normal(size=A.shape[1]) * 0.5 + A[i]
        analytic = float(grad_log_prob(policy, S[i], a) @ v)
        f = lambda t: log_prob(unflatten(policy.arch, t), S[i], a)
        numeric = (f(theta + h * v) - f(theta - h * v)) / (2 * h)
        errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-4 and elapsed < 60
    report(request, "C6 gradient correctness", ok,
           f"100 directional probes, max rel err {max(errs):.1e} (< 1e-4); {elapsed:.1f}s (< 60s)")
    assert ok


def test_c7_rollout_as_validation(runs, request):
    ro = [r["rollout"] for r in runs]
    wins = sum(x["steps"] >= x["success_only"] for x in ro)
    wins_traj = sum(x["trajectories"] >= x["success_only"] for x in ro)
    ok = wins >= 3
    report(request, "C7 rollout-as-validation", ok,
           f"rollouts pos/neg {[(x['n_pos'], x['n_neg']) for x in ro]}; success-only {_fmt([x['success_only'] for x in ro])} "
           f"weighted(steps) {_fmt([x['steps'] for x in ro])} (>= on {wins}/5, need 3); "
           f"weighted(trajectories) {_fmt([x['trajectories'] for x in ro])} (>= on {wins_traj}/5)")
    assert ok


def test_c8_consistency(request):
    train, val = planted_split(DataSection(fail_modes=("grasp_miss", "wrong_goal", "noisy")), 0)
    qoq, retr = [], []
    for s in CONSISTENCY_SEEDS:
        policy, _ = train_bc(train, sim.policy_arch(), TrainConfig(300, 64, seed=s))
        sketch = OporpConfig(policy.arch.group_size("all"), 1024, 0)
        caches = [build_grad_cache(policy, ds, "all", sketch) for ds in (train, val)]
        qoq.append(score_caches(*caches, "max").trajectories)
        ae, _ = train_autoencoder(concat_datasets(train, val), TrainConfig(100, 64, seed=s))
        retr.append(aggregate_by_ids(retrieval_step_scores(train, val, ae), train.ids))
    wq, wr = consistency("qoq", qoq).w, consistency("retrieval", retr).w
    ok = wq > wr
    report(request, "C8 ranking consistency", ok, f"Kendall's W qoq {wq:.4f} > retrieval {wr:.4f}: {ok}")
    assert ok


PROPERTY_TESTS = [
    "tests/test_data.py::test_round_trip_is_exact",
    "tests/test_data.py::test_write_is_byte_identical",
    "tests/test_grads.py::test_cache_round_trip",
    "tests/test_grads.py::test_cache_with_skips_round_trip",
    "tests/test_policy.py::test_flatten_round_trip",
    "tests/test_policy.py::test_checkpoint_round_trip",
    "tests/test_scoring.py::test_score_table_round_trip",
    "tests/test_curation.py::test_result_json_round_trip",
    "tests/test_baselines.py::test_autoencoder_file_round_trip",
    "tests/test_scoring.py::test_bounds_and_order",
    "tests/test_scoring.py::test_self_retrieval",
    "tests/test_curation.py::test_scale_invariance",
    "tests/test_curation.py::test_budget_exact_and_subset",
    "tests/test_grads.py::test_cache_is_deterministic",
    "tests/test_training.py::test_training_is_deterministic",
    "tests/test_experiment.py::test_experiment_is_deterministic",
    "tests/test_cli.py::test_gen_data_is_reproducible",
]


def test_c9_property_suites(request):
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_TESTS],
                          cwd=ROOT, capture_output=True, text=True)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    ok = proc.returncode == 0
    report(request, "C9 property suites", ok, f"{len(PROPERTY_TESTS)} suites: {summary}")
    assert ok, proc.stdout[-4000:]
