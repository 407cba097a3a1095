"""PointBin: a deterministic 2-D pick-and-place toy environment.

State vector (7): gripper x, gripper y, holding flag, object x, object y, goal x, goal y.
Action vector (3): delta x, delta y (each clamped to +-0.05), grip (clamped to [0, 1],
closes at >= 0.5).

Step rule: the gripper moves by the clamped delta; an object already held follows it;
then grip < 0.5 releases, while grip >= 0.5 within ``EPS_GRASP`` of a free object grasps
it (the object snaps to the gripper). An episode succeeds once the object rests within
``EPS_GOAL`` of the goal with the gripper open.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Trajectory
from .policy import PolicyArch

STATE_DIM = 7
ACTION_DIM = 3
EPS_GRASP = 0.03
EPS_GOAL = 0.05
MAX_DELTA = 0.05
GRIP_THRESHOLD = 0.5
MAX_STEPS = 200
MISS_OFFSET = 0.08
NOISE_HALF_WIDTH = 0.04
MIN_DISTRACTOR_DIST = 0.2
START_MARGIN = 0.05
# start layout: the gripper leaves a home pose, the object lies on a table band and the
# goal is a bin across the workspace; each gets a small seeded jitter
HOME_XY = (0.5, 0.1)
BIN_XY = (0.5, 0.85)
START_JITTER = 0.05
TABLE_X = (0.1, 0.9)
TABLE_Y = (0.2, 0.6)
# proportional controllers commit (grip / release) once the post-move distance to
# their target is within half the relevant tolerance
COMMIT_FRACTION = 0.5

MODES = ("expert", "grasp_miss", "wrong_goal", "noisy")
FAIL_MODES = ("grasp_miss", "wrong_goal", "noisy")


class SimError(ValueError):
    pass


@dataclass(frozen=True)
class PointBinState:
    gripper_xy: tuple[float, float]
    holding: int
    object_xy: tuple[float, float]
    goal_xy: tuple[float, float]

    def to_vector(self) -> np.ndarray:
        return np.array([*self.gripper_xy, float(self.holding), *self.object_xy, *self.goal_xy])

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "PointBinState":
        v = [float(x) for x in v]
        return cls((v[0], v[1]), int(v[2] >= 0.5), (v[3], v[4]), (v[5], v[6]))


@dataclass(frozen=True)
class EpisodeOutcome:
    success: bool
    steps_taken: int
    final_state: PointBinState


def clamp_actions(actions: np.ndarray) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.float64)
    out = np.empty_like(actions)
    out[..., :2] = np.clip(actions[..., :2], -MAX_DELTA, MAX_DELTA)
    out[..., 2] = np.clip(actions[..., 2], 0.0, 1.0)
    return out


def step_arrays(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Vectorized dynamics on (..., 7) states and (..., 3) actions."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if not np.all(np.isfinite(actions)):
        raise SimError("non-finite action")
    act = clamp_actions(actions)
    grip = act[..., 2]
    gripper = np.clip(states[..., 0:2] + act[..., 0:2], 0.0, 1.0)
    was_holding = states[..., 2] >= 0.5
    obj = np.where(was_holding[..., None], gripper, states[..., 3:5])
    dist = np.hypot(gripper[..., 0] - obj[..., 0], gripper[..., 1] - obj[..., 1])
    closed = grip >= GRIP_THRESHOLD
    grasp = closed & ~was_holding & (dist <= EPS_GRASP)
    holding = np.where(closed, was_holding | grasp, False)
    obj = np.where(grasp[..., None], gripper, obj)
    out = np.empty_like(states)
    out[..., 0:2] = gripper
    out[..., 2] = holding.astype(np.float64)
    out[..., 3:5] = obj
    out[..., 5:7] = states[..., 5:7]
    return out


def env_step(state: PointBinState, action: Sequence[float]) -> PointBinState:
    return PointBinState.from_vector(step_arrays(state.to_vector(), np.asarray(action, dtype=np.float64)))


def success_mask(states: np.ndarray) -> np.ndarray:
    states = np.asarray(states)
    dist = np.hypot(states[..., 3] - states[..., 5], states[..., 4] - states[..., 6])
    return (states[..., 2] < 0.5) & (dist <= EPS_GOAL)


def is_success(state: PointBinState | np.ndarray) -> bool:
    vec = state.to_vector() if isinstance(state, PointBinState) else state
    return bool(success_mask(vec))


def sample_start(rng: np.random.Generator) -> np.ndarray:
    """Seeded table-and-bin start with the object at least 2*EPS_GOAL away from the goal."""
    while True:
        gripper = np.asarray(HOME_XY) + rng.uniform(-START_JITTER, START_JITTER, size=2)
        goal = np.asarray(BIN_XY) + rng.uniform(-START_JITTER, START_JITTER, size=2)
        obj = np.array([rng.uniform(*TABLE_X), rng.uniform(*TABLE_Y)])
        if math.dist(obj, goal) > 2 * EPS_GOAL:
            return np.array([*gripper, 0.0, *obj, *goal])


def _toward(gripper: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, float]:
    delta = np.clip(target - gripper, -MAX_DELTA, MAX_DELTA)
    moved = np.clip(gripper + delta, 0.0, 1.0)
    return delta, math.dist(moved, target)


def expert_action(state: np.ndarray) -> np.ndarray:
    """The scripted expert: reach the object, grasp, carry to the goal, release."""
    gripper = state[0:2]
    if state[2] < 0.5:
        delta, remaining = _toward(gripper, state[3:5])
        grip = 1.0 if remaining <= COMMIT_FRACTION * EPS_GRASP else 0.0
    else:
        delta, remaining = _toward(gripper, state[5:7])
        grip = 0.0 if remaining <= COMMIT_FRACTION * EPS_GOAL else 1.0
    return np.array([delta[0], delta[1], grip])


class ExpertPolicy:
    """Scripted expert exposed through the same ``act`` interface as a trained policy."""

    d_s = STATE_DIM
    d_a = ACTION_DIM

    def act(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        return np.stack([expert_action(s) for s in states])


def policy_arch(hidden: Sequence[int] = (64, 64)) -> PolicyArch:
    """Policy architecture for PointBin.

    The fixed input map feeds the network the gripper position and holding flag
    rescaled to [-1, 1] plus the object and goal offsets relative to the gripper;
    the output scale maps the network's unit range onto the +-0.05 move limits.
    """
    m = np.zeros((STATE_DIM, STATE_DIM))
    m[0, 0] = m[1, 1] = m[2, 2] = 2.0
    m[3, 3] = m[4, 4] = m[5, 5] = m[6, 6] = 2.0
    m[0, 3] = m[0, 5] = m[1, 4] = m[1, 6] = -2.0
    bias = [-1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0]
    return PolicyArch(STATE_DIM, ACTION_DIM, tuple(hidden), m, bias, (MAX_DELTA, MAX_DELTA, 1.0))


def _miss_point(obj: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    while True:
        angle = rng.uniform(0.0, 2.0 * math.pi)
        point = obj + MISS_OFFSET * np.array([math.cos(angle), math.sin(angle)])
        if np.all((point >= 0.0) & (point <= 1.0)):
            return point


def _distractor(goal: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lo, hi = START_MARGIN, 1.0 - START_MARGIN
    while True:
        point = rng.uniform(lo, hi, size=2)
        if math.dist(point, goal) >= MIN_DISTRACTOR_DIST:
            return point


def scripted_demo(mode: str, seed: int, max_steps: int = MAX_STEPS) -> Trajectory:
    """Roll out one scripted demonstration; the label comes from the outcome."""
    if mode not in MODES:
        raise SimError(f"unknown demo mode {mode!r}; expected one of {MODES}")
    if seed < 0 or max_steps < 1:
        raise SimError("seed must be >= 0 and max_steps >= 1")
    rng = np.random.default_rng(seed)
    state = sample_start(rng)
    miss = _miss_point(state[3:5], rng) if mode == "grasp_miss" else None
    distractor = _distractor(state[5:7], rng) if mode == "wrong_goal" else None
    phase = "approach"
    states, actions = [], []
    done = False
    while not done and len(states) < max_steps:
        gripper = state[0:2]
        if mode == "grasp_miss":
            if phase == "approach":
                delta, remaining = _toward(gripper, miss)
                grip = 1.0 if remaining <= COMMIT_FRACTION * EPS_GRASP else 0.0
                if grip:
                    phase = "retreat"
            else:
                delta, remaining = _toward(gripper, state[5:7])
                grip = 0.0
                done = remaining <= COMMIT_FRACTION * EPS_GOAL
            action = np.array([delta[0], delta[1], grip])
        elif mode == "wrong_goal" and state[2] >= 0.5:
            delta, remaining = _toward(gripper, distractor)
            grip = 0.0 if remaining <= COMMIT_FRACTION * EPS_GOAL else 1.0
            done = grip == 0.0
            action = np.array([delta[0], delta[1], grip])
        else:
            action = expert_action(state)
            if mode == "noisy":
                action = action + rng.uniform(-NOISE_HALF_WIDTH, NOISE_HALF_WIDTH, size=3)
        action = clamp_actions(action)
        states.append(state)
        actions.append(action)
        state = step_arrays(state, action)
        if success_mask(state):
            done = True
    label = "success" if success_mask(state) else "failure"
    meta = {
        "generator": "pointbin",
        "mode": mode,
        "seed": int(seed),
        "failure_mode": None if mode == "expert" else mode,
    }
    return Trajectory(0, np.array(states), np.array(actions), label, meta)


def replay(traj: Trajectory) -> tuple[np.ndarray, EpisodeOutcome]:
    """Re-execute the recorded actions from the first recorded state.

    Returns the replayed pre-action states (same shape as ``traj.states``) and the outcome.
    """
    state = traj.states[0]
    visited = []
    for action in traj.actions:
        visited.append(state)
        state = step_arrays(state, action)
    outcome = EpisodeOutcome(bool(success_mask(state)), len(traj), PointBinState.from_vector(state))
    return np.array(visited), outcome


def generate_dataset(
    n_success: int, n_fail: int, fail_modes: Sequence[str], seed: int, max_steps: int = MAX_STEPS
) -> Dataset:
    """Expert ids come first (0..n_success-1), failures cycle through ``fail_modes``;
    demo seeds are ``seed + id`` and the final order is shuffled by ``seed``."""
    if n_success < 0 or n_fail < 0:
        raise SimError("counts must be non-negative")
    if n_fail > 0 and not fail_modes:
        raise SimError("fail_modes must be non-empty when n_fail > 0")
    for m in fail_modes:
        if m not in FAIL_MODES:
            raise SimError(f"unknown failure mode {m!r}; expected one of {FAIL_MODES}")
    trajs = []
    for tid in range(n_success + n_fail):
        mode = "expert" if tid < n_success else fail_modes[(tid - n_success) % len(fail_modes)]
        demo = scripted_demo(mode, seed + tid, max_steps)
        demo.id = tid
        trajs.append(demo)
    order = np.random.default_rng(seed).permutation(len(trajs))
    return Dataset(STATE_DIM, ACTION_DIM, [trajs[i] for i in order])


ActFn = Callable[[np.ndarray], np.ndarray]


def _act_fn(policy) -> ActFn:
    if hasattr(policy, "act"):
        d_s, d_a = getattr(policy, "d_s", STATE_DIM), getattr(policy, "d_a", ACTION_DIM)
        if (d_s, d_a) != (STATE_DIM, ACTION_DIM):
            raise SimError(f"policy dims ({d_s},{d_a}) do not match environment (7,3)")
        return policy.act
    if callable(policy):
        return policy
    raise SimError("policy must expose act(states) or be callable")


def _episode_starts(episodes: int, seed: int) -> np.ndarray:
    return np.stack([sample_start(np.random.default_rng([seed, ep])) for ep in range(episodes)])


def run_episodes(
    policy,
    episodes: int,
    seed: int,
    max_steps: int = MAX_STEPS,
    stochastic: bool = False,
    record: bool = False,
):
    """Run ``episodes`` seeded rollouts in lockstep.

    With ``stochastic`` the policy's Gaussian is sampled (the policy must expose
    ``log_std``); otherwise the mean is executed. Returns the success flags, and when
    ``record`` is set also the per-episode (states, actions) lists.
    """
    if episodes < 0:
        raise SimError("episodes must be >= 0")
    act = _act_fn(policy)
    if episodes == 0:
        return (np.zeros(0, dtype=bool), []) if record else np.zeros(0, dtype=bool)
    states = _episode_starts(episodes, seed)
    noise_rngs = [np.random.default_rng([seed, ep, 1]) for ep in range(episodes)] if stochastic else None
    std = np.exp(policy.log_std) if stochastic else None
    active = np.ones(episodes, dtype=bool)
    success = np.zeros(episodes, dtype=bool)
    trace_s: list[list[np.ndarray]] = [[] for _ in range(episodes)]
    trace_a: list[list[np.ndarray]] = [[] for _ in range(episodes)]
    for _ in range(max_steps):
        if not active.any():
            break
        actions = np.asarray(act(states), dtype=np.float64)
        if stochastic:
            eps = np.stack([r.standard_normal(ACTION_DIM) for r in noise_rngs])
            actions = actions + std * eps
        nxt = step_arrays(states, actions)
        if record:
            for ep in np.flatnonzero(active):
                trace_s[ep].append(states[ep])
                trace_a[ep].append(actions[ep])
        states = np.where(active[:, None], nxt, states)
        done_now = active & success_mask(states)
        success |= done_now
        active &= ~done_now
    if record:
        return success, list(zip(trace_s, trace_a))
    return success


def evaluate_policy(policy, episodes: int, seed: int, max_steps: int = MAX_STEPS) -> float:
    """Fraction of deterministic (mean-action) rollouts that succeed."""
    if episodes < 1:
        raise SimError("episodes must be >= 1")
    flags = run_episodes(policy, episodes, seed, max_steps)
    return int(flags.sum()) / episodes


def rollout_dataset(
    policy,
    episodes: int,
    seed: int,
    label_by_outcome: bool = True,
    stochastic: bool = True,
    max_steps: int = MAX_STEPS,
) -> Dataset:
    """Turn policy rollouts into a dataset (ids 0..episodes-1)."""
    flags, traces = run_episodes(policy, episodes, seed, max_steps, stochastic=stochastic, record=True)
    trajs = []
    for ep, (ok, (s, a)) in enumerate(zip(flags, traces)):
        label = ("success" if ok else "failure") if label_by_outcome else None
        meta = {"generator": "rollout", "seed": int(seed), "episode": ep, "stochastic": bool(stochastic)}
        trajs.append(Trajectory(ep, np.array(s), np.array(a), label, meta))
    return Dataset(STATE_DIM, ACTION_DIM, trajs)
