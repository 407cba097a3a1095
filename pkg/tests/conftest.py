import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qoq import sim
from qoq.data import Dataset, Trajectory
from qoq.policy import PolicyArch, init_params
from qoq.training import TrainConfig, train_bc

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")

ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def random_dataset(rng, n_traj=5, d_s=3, d_a=2, max_len=6, ids=None):
    ids = list(range(n_traj)) if ids is None else ids
    trajs = []
    for i in ids:
        t = int(rng.integers(1, max_len + 1))
        label = ["success", "failure"][int(rng.integers(2))]
        trajs.append(Trajectory(i, rng.normal(size=(t, d_s)), rng.normal(size=(t, d_a)), label, {"mode": label}))
    return Dataset(d_s, d_a, trajs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_arch():
    return PolicyArch(3, 2, (5, 4))


@pytest.fixture(scope="session")
def small_policy(small_arch):
    p = init_params(small_arch, 7)
    r = np.random.default_rng(7)
    p.biases = [b + r.normal(scale=0.1, size=b.shape) for b in p.biases]
    return p


@pytest.fixture(scope="session")
def small_data():
    return random_dataset(np.random.default_rng(99), n_traj=6)


@pytest.fixture(scope="session")
def planted_small():
    """A small PointBin dataset and a briefly trained policy."""
    ds = sim.generate_dataset(12, 8, ["grasp_miss", "wrong_goal"], 3)
    policy, _ = train_bc(ds, sim.policy_arch(), TrainConfig(epochs=20, seed=0))
    return ds, policy
