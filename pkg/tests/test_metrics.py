import itertools
import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qoq.curation import CurationResult
from qoq.data import Dataset, Trajectory, dataset_hash
from qoq.metrics import MetricError, curation_accuracy, kendalls_w, mean_stderr, ranking_from_scores
from qoq.scoring import TrajScore


def labeled(n_good, n_bad, length=2):
    trajs = [Trajectory(i, np.zeros((length, 1)), np.zeros((length, 1)), "success" if i < n_good else "failure",
                        {"mode": "expert" if i < n_good else "grasp_miss"}) for i in range(n_good + n_bad)]
    return Dataset(1, 1, trajs)


def result(ds, ids, level="trajectory"):
    return CurationResult(level, "m", len(ids), f"fixed:{len(ids)}", ids, dataset_hash(ds))


def test_accuracy_arithmetic():
    ds = labeled(60, 40)
    rep = curation_accuracy(result(ds, list(range(54)) + list(range(60, 66))), ds)
    assert rep.accuracy == pytest.approx(0.90)
    assert rep.per_mode == {"expert": {"selected": 54, "total": 60}, "grasp_miss": {"selected": 6, "total": 40}}


def test_select_all_accuracy():
    ds = labeled(60, 40)
    assert curation_accuracy(result(ds, ds.ids), ds).accuracy == pytest.approx(0.60)


def test_accuracy_against_hand_count():
    r = np.random.default_rng(0)
    trajs = []
    for i in range(30):
        n = int(r.integers(1, 5))
        trajs.append(Trajectory(i, np.zeros((n, 1)), np.zeros((n, 1)), ["success", "failure"][int(r.integers(2))]))
    ds = Dataset(1, 1, trajs)
    by = ds.by_id()
    for seed in range(20):
        ids = np.random.default_rng(seed).choice(30, 10, replace=False).tolist()
        rep = curation_accuracy(result(ds, ids), ds)
        good = [i for i in ids if by[i].label == "success"]
        assert rep.accuracy == len(good) / 10
        assert rep.step_accuracy == sum(len(by[i]) for i in good) / sum(len(by[i]) for i in ids)
    steps = [(0, 0), (1, 0), (2, 0)]
    rep = curation_accuracy(result(ds, steps, "step"), ds)
    assert rep.accuracy == sum(by[t].label == "success" for t, _ in steps) / 3


def test_accuracy_order_invariant():
    ds = labeled(5, 5)
    assert curation_accuracy(result(ds, [0, 7, 3]), ds).accuracy == curation_accuracy(result(ds, [7, 3, 0]), ds).accuracy


def test_accuracy_needs_labels():
    ds = Dataset(1, 1, [Trajectory(0, [[0.0]], [[0.0]])])
    with pytest.raises(MetricError):
        curation_accuracy(result(ds, [0]), ds)


def test_w_examples():
    assert kendalls_w([[1, 2, 3]] * 3) == 1.0
    assert kendalls_w([[1, 2, 3], [3, 2, 1]]) == 0.0


def spearman(a, b):
    ra = {x: i for i, x in enumerate(a)}
    rb = {x: i for i, x in enumerate(b)}
    n = len(a)
    return 1 - 6 * sum((ra[x] - rb[x]) ** 2 for x in a) / (n * (n * n - 1))


@given(st.integers(2, 5), st.integers(2, 8), st.integers(0, 10**6))
def test_w_matches_mean_spearman_identity(m, n, seed):
    """Independent oracle: mean pairwise Spearman rho = (m W - 1) / (m - 1)."""
    r = np.random.default_rng(seed)
    rankings = [r.permutation(n).tolist() for _ in range(m)]
    rho = np.mean([spearman(a, b) for a, b in itertools.combinations(rankings, 2)])
    w = kendalls_w(rankings)
    assert 0.0 <= w <= 1.0
    assert w == pytest.approx((rho * (m - 1) + 1) / m, abs=1e-12)


def test_w_errors():
    with pytest.raises(MetricError):
        kendalls_w([[1, 2]])
    with pytest.raises(MetricError):
        kendalls_w([[1, 2], [1, 3]])
    with pytest.raises(MetricError):
        kendalls_w([[1], [1]])


def test_ranking_tie_break():
    assert ranking_from_scores([TrajScore(5, 0.1, 1), TrajScore(2, 0.1, 1), TrajScore(9, 0.3, 1)]) == [9, 2, 5]


def test_mean_stderr_matches_statistics_module():
    vals = [0.9, 0.95, 0.85, 1.0, 0.92]
    mean, se = mean_stderr(vals)
    assert mean == pytest.approx(statistics.mean(vals))
    assert se == pytest.approx(statistics.stdev(vals) / len(vals) ** 0.5)
    assert mean_stderr([0.5]) == (0.5, 0.0)
    with pytest.raises(MetricError):
        mean_stderr([])
