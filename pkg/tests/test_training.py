import numpy as np
import pytest

from qoq import sim
from qoq.policy import checkpoint_bytes, init_params
from qoq.training import Adam, TrainConfig, TrainingError, bc_loss, minibatch_adam, train_bc
from qoq.data import Dataset


def test_adam_single_step_matches_hand_computation():
    theta = np.array([1.0, -2.0])
    g = np.array([0.5, -0.1])
    opt = Adam(2, lr=0.1)
    opt.step(theta, g)
    # first step: m_hat = g, v_hat = g^2, update = lr * sign(g) (up to eps)
    np.testing.assert_allclose(theta, [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 0.1 / (0.1 + 1e-8)])


def test_adam_minimizes_quadratic():
    theta = np.array([3.0, -4.0])
    loss_grad = lambda th, idx: (float(th @ th), 2 * th)
    theta, losses, steps = minibatch_adam(theta, 1, loss_grad, TrainConfig(epochs=2000, batch_size=1, lr=0.05))
    assert np.abs(theta).max() < 1e-2
    assert steps == 2000


def test_bc_loss_decreases(planted_small):
    ds, policy = planted_small
    init = init_params(sim.policy_arch(), 0)
    assert bc_loss(policy, ds) < bc_loss(init, ds)


def test_training_is_deterministic(planted_small):
    ds, _ = planted_small
    cfg = TrainConfig(epochs=3, seed=11)
    a, ra = train_bc(ds, sim.policy_arch(), cfg)
    b, rb = train_bc(ds, sim.policy_arch(), cfg)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert ra.epoch_losses == rb.epoch_losses
    c, _ = train_bc(ds, sim.policy_arch(), TrainConfig(epochs=3, seed=12))
    assert checkpoint_bytes(a) != checkpoint_bytes(c)


def test_report_and_checkpoint(tmp_path, planted_small):
    ds, _ = planted_small
    p, report = train_bc(ds, sim.policy_arch(), TrainConfig(epochs=2), tmp_path / "c.bin")
    assert report.checkpoint_path == str(tmp_path / "c.bin")
    assert report.n_optimizer_steps == 2 * -(-ds.n_steps // 64)
    assert len(report.epoch_losses) == 2
    assert p.info["training"]["n_examples"] == ds.n_steps
    report.save(tmp_path / "r.json")


def test_training_errors(planted_small):
    with pytest.raises(TrainingError):
        train_bc(Dataset(7, 3, []), sim.policy_arch(), TrainConfig(epochs=1))
    ds, _ = planted_small
    with pytest.raises(TrainingError):
        train_bc(ds, init_params(sim.policy_arch(), 0).arch.__class__(3, 3), TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_non_finite_loss_reports_epoch():
    with pytest.raises(TrainingError, match="epoch 0"):
        minibatch_adam(np.zeros(1), 1, lambda th, idx: (float("nan"), th), TrainConfig(epochs=1))
