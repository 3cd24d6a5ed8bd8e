"""Return estimators, scoring and the evaluation protocol."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from titrl.autodiff import no_grad
from titrl.envs import ObservationHistory
from titrl.errors import ShapeError

EVAL_EPISODES = 100


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    last_value: np.ndarray | float,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets.

    Arrays are ``(T,)`` or ``(T, n_envs)``; ``dones[t]`` marks that the episode
    ended at step ``t`` and ``last_value`` bootstraps the step after ``T-1``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ShapeError(f"length mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    advantages = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(last_value, dtype=np.float64), rewards.shape[1:])
    next_adv = np.zeros(rewards.shape[1:])
    for t in reversed(range(len(rewards))):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        advantages[t] = next_adv
        next_value = values[t]
    return advantages, advantages + values


def returns_to_go(rewards, gamma: float = 1.0) -> np.ndarray:
    """Discounted suffix sums; with ``gamma == 1`` these are plain suffix sums."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("trajectory is empty")
    out = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(len(rewards))):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def normalized_score(score: float, random_score: float, expert_score: float) -> float:
    if not expert_score > random_score:
        raise ValueError(f"expert score {expert_score} must exceed random score {random_score}")
    return 100.0 * (score - random_score) / (expert_score - random_score)


REFERENCE_SCORES = {
    "halfcheetah": (-280.178953, 12135.0),
    "hopper": (-20.272305, 3234.3),
    "walker": (1.629008, 4592.3),
}


@dataclass
class Trajectory:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def returns_to_go(self, gamma: float = 1.0) -> np.ndarray:
        return returns_to_go(self.rewards, gamma)


@dataclass
class EvalReport:
    returns: list[float]
    episodes: int = field(init=False)
    mean: float = field(init=False)
    std: float = field(init=False)
    normalized: float | None = None

    def __post_init__(self):
        r = np.asarray(self.returns, dtype=np.float64)
        self.episodes = len(r)
        self.mean = float(r.mean())
        self.std = float(r.std())

    def to_dict(self) -> dict:
        return {"episodes": self.episodes, "mean": self.mean, "std": self.std, "normalized": self.normalized, "returns": list(self.returns)}


Policy = Callable[[np.ndarray, np.ndarray], np.ndarray]


def greedy_policy(model) -> Policy:
    """Argmax (discrete) or mean (continuous) action from a backbone model."""

    def act(windows: np.ndarray, valid: np.ndarray) -> np.ndarray:
        with no_grad():
            out = model.forward(windows, valid, training=False)
        if model.cfg.action_kind == "discrete":
            return out.action.data.argmax(axis=-1)
        return out.action.data

    return act


def evaluate_policy(policy, env_factory: Callable[[], object], episodes: int = EVAL_EPISODES, seed: int = 0, context_len: int | None = None) -> EvalReport:
    """Run ``episodes`` seeded episodes side by side and report return statistics.

    Episode ``i`` resets with seed ``seed + i``. ``policy`` is either a model
    (acted on greedily) or a callable ``(windows, valid) -> actions``.
    """
    if hasattr(policy, "cfg"):
        context_len = policy.cfg.context_len
        policy = greedy_policy(policy)
    context_len = context_len or 1
    envs = [env_factory() for _ in range(episodes)]
    histories = [ObservationHistory(context_len, env.obs_shape) for env in envs]
    for i, (env, hist) in enumerate(zip(envs, histories)):
        hist.push(env.reset(seed=seed + i))
    returns = np.zeros(episodes)
    active = list(range(episodes))
    while active:
        windows, valid = zip(*(histories[i].window() for i in active))
        actions = policy(np.stack(windows), np.stack(valid))
        still = []
        for i, a in zip(active, actions):
            res = envs[i].step(int(a) if np.ndim(a) == 0 else a)
            returns[i] += res.reward
            if res.done:
                continue
            histories[i].push(res.observation)
            still.append(i)
        active = still
    return EvalReport(returns.tolist())


METRIC_COLUMNS = ("wall_clock_s", "env_steps", "updates", "mean_return", "std_return", "policy_loss", "value_loss", "entropy")


class MetricsWriter:
    """Append-only metrics CSV, one row per update.

    With ``wall_clock=False`` the first column is written as 0 so that the
    file depends only on the seed.
    """

    def __init__(self, path: str | Path | None, columns=METRIC_COLUMNS, wall_clock: bool = True):
        self.path = Path(path) if path else None
        self.columns = tuple(columns)
        self.wall_clock = wall_clock
        self.start = time.perf_counter()
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(self.columns)

    def write(self, **values) -> None:
        values.setdefault("wall_clock_s", time.perf_counter() - self.start if self.wall_clock else 0.0)
        row = {c: values.get(c, float("nan")) for c in self.columns}
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(row[c]) for c in self.columns])


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))
