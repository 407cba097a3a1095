import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qoq import sim
from qoq.curation import (
    BudgetPolicy, CurationError, CurationResult, materialize, select_top_steps, select_top_trajectories,
    trajectory_step_budget,
)
from qoq.data import Dataset, Trajectory, dataset_hash
from qoq.scoring import StepScore, TrajScore

from conftest import random_dataset


def ds_of(ids, lengths=None, labels=None):
    lengths = lengths or [1] * len(ids)
    labels = labels or ["success"] * len(ids)
    return Dataset(1, 1, [Trajectory(i, np.full((n, 1), float(i)), np.zeros((n, 1)), lab)
                          for i, n, lab in zip(ids, lengths, labels)])


def scores(d):
    return [TrajScore(k, v, 1) for k, v in d.items()]


def test_top_n_example():
    ds = ds_of([1, 2, 3])
    r = select_top_trajectories(scores({1: 0.9, 2: 0.5, 3: 0.1}), 2, ds)
    assert r.selected == [1, 2] and r.budget == 2


def test_tie_break_lower_id():
    ds = ds_of([4, 9])
    r = select_top_trajectories(scores({9: 0.9, 4: 0.9}), 1, ds)
    assert r.selected == [4]
    assert r.ties == [{"score": 0.9, "candidates": [4, 9], "selected": [4]}]


def test_match_success_on_planted():
    ds = sim.generate_dataset(60, 40, ["grasp_miss", "wrong_goal"], 0)
    assert BudgetPolicy.parse("match-success").resolve(ds) == 60
    assert BudgetPolicy.parse("half").resolve(ds) == 50
    assert BudgetPolicy.parse("fixed:7").resolve(ds) == 7


@pytest.mark.parametrize("text", ["fixed:0", "fixed:x", "most", "fixed:"])
def test_bad_budgets(text):
    with pytest.raises(CurationError):
        BudgetPolicy.parse(text)


def test_budget_round_trip_text():
    for text in ("fixed:3", "match-success", "half"):
        assert str(BudgetPolicy.parse(text)) == text


def test_budget_errors():
    ds = ds_of([1, 2])
    with pytest.raises(CurationError, match="1 <= N <= 2"):
        BudgetPolicy.fixed(3).resolve(ds)
    with pytest.raises(CurationError):
        BudgetPolicy.parse("match-success").resolve(Dataset(1, 1, [Trajectory(0, [[0.0]], [[0.0]])]))
    with pytest.raises(CurationError, match="scoreable"):
        select_top_trajectories(scores({1: 0.5, 2: -math.inf}), 2, ds)


def test_scores_must_cover_dataset():
    with pytest.raises(CurationError, match="missing"):
        select_top_trajectories(scores({1: 0.5}), 1, ds_of([1, 2]))


def test_sentinel_excluded():
    r = select_top_trajectories(scores({1: -math.inf, 2: -5.0}), 1, ds_of([1, 2]))
    assert r.selected == [2]


score_maps = st.dictionaries(st.integers(0, 50), st.floats(-1, 1), min_size=1, max_size=20)


@given(score_maps, st.data())
def test_budget_exact_and_subset(d, data):
    n = data.draw(st.integers(1, len(d)))
    ds = ds_of(sorted(d))
    r = select_top_trajectories(scores(d), n, ds)
    assert len(r.selected) == n and set(r.selected) <= set(d)
    assert len(materialize(r, ds)) == n


@given(score_maps, st.data(), st.floats(1e-3, 1e3))
def test_scale_invariance(d, data, c):
    n = data.draw(st.integers(1, len(d)))
    ds = ds_of(sorted(d))
    a = select_top_trajectories(scores(d), n, ds).selected
    b = select_top_trajectories(scores({k: v * c for k, v in d.items()}), n, ds).selected
    assert a == b


@given(score_maps, st.data())
def test_monotonicity(d, data):
    n = data.draw(st.integers(1, len(d)))
    ds = ds_of(sorted(d))
    sel = select_top_trajectories(scores(d), n, ds).selected
    pick = data.draw(st.sampled_from(sel))
    bumped = dict(d)
    bumped[pick] = d[pick] + data.draw(st.floats(0, 2))
    assert pick in select_top_trajectories(scores(bumped), n, ds).selected


@given(score_maps, st.randoms())
def test_input_order_irrelevant(d, rnd):
    ds = ds_of(sorted(d))
    items = scores(d)
    shuffled = list(items)
    rnd.shuffle(shuffled)
    assert select_top_trajectories(items, 1, ds).selected == select_top_trajectories(shuffled, 1, ds).selected


def test_step_selection():
    ds = ds_of([1, 2], lengths=[3, 2])
    steps = [StepScore(1, 0, 0.1), StepScore(1, 1, 0.9), StepScore(1, 2, 0.5), StepScore(2, 0, 0.9), StepScore(2, 1, 0.2)]
    r = select_top_steps(steps, 3, ds)
    assert r.selected == [(1, 1), (2, 0), (1, 2)]
    assert select_top_steps(list(reversed(steps)), 3, ds).selected == r.selected
    everything = select_top_steps(steps, 5, ds)
    assert sorted(everything.selected) == sorted((s.traj_id, s.step_idx) for s in steps)
    with pytest.raises(CurationError):
        select_top_steps(steps, 6, ds)
    with pytest.raises(CurationError):
        select_top_steps([StepScore(1, 9, 0.0)], 1, ds)


def test_step_fragments():
    ds = ds_of([1, 2], lengths=[4, 2], labels=["success", "failure"])
    r = select_top_steps([StepScore(1, 0, 0.9), StepScore(1, 1, 0.8), StepScore(1, 3, 0.7), StepScore(2, 1, 0.6),
                          StepScore(1, 2, 0.0), StepScore(2, 0, 0.0)], 4, ds)
    out = materialize(r, ds).by_id()
    assert len(out[1]) == 3 and out[1].meta["fragment"]["segments"] == [[0, 2], [3, 4]]
    assert out[2].label == "failure" and out[2].meta["fragment"]["steps"] == [1]


def test_materialize_preserves_labels(rng):
    ds = random_dataset(rng, n_traj=12)
    for seed in range(10):
        r = np.random.default_rng(seed)
        d = {t: float(r.normal()) for t in ds.ids}
        res = select_top_trajectories(scores(d), 5, ds)
        cur = materialize(res, ds)
        orig = ds.by_id()
        assert all(t.label == orig[t.id].label and t == orig[t.id] for t in cur)


def test_select_all_is_identity(rng):
    ds = random_dataset(rng, n_traj=5)
    res = select_top_trajectories(scores({t: 0.0 for t in ds.ids}), len(ds), ds)
    assert materialize(res, ds) == ds


def test_stale_hash_rejected(rng):
    ds = random_dataset(rng, n_traj=4)
    other = random_dataset(rng, n_traj=4)
    res = select_top_trajectories(scores({t: 0.0 for t in ds.ids}), 2, ds)
    with pytest.raises(CurationError, match="stale"):
        materialize(res, other)


def test_result_json_round_trip(tmp_path):
    ds = ds_of([1, 2, 3], lengths=[2, 3, 4])
    r = select_top_trajectories(scores({1: 0.2, 2: 0.2, 3: 0.1}), 2, ds, score_ref={"x": "y"})
    r.save(tmp_path / "r.json")
    back = CurationResult.load(tmp_path / "r.json")
    assert back.to_json() == r.to_json() and back.dataset_hash == dataset_hash(ds)
    assert trajectory_step_budget(r, ds) == 5
    s = select_top_steps([StepScore(1, 0, 0.5), StepScore(3, 2, 0.4)], 2, ds)
    s.save(tmp_path / "s.json")
    assert CurationResult.load(tmp_path / "s.json").selected == [(1, 0), (3, 2)]


def test_result_invariants():
    with pytest.raises(CurationError):
        CurationResult("trajectory", "x", 2, "fixed:2", [1], "h")
    with pytest.raises(CurationError):
        CurationResult("trajectory", "x", 2, "fixed:2", [1, 1], "h")
