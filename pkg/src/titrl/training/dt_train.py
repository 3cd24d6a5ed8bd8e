"""Offline supervised training of the return-conditioned sequence model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from titrl.autodiff import Adam, Tensor, backward, clip_grad_norm, log_softmax, no_grad
from titrl.dt import DTModel, dt_sequence_forward
from titrl.envs import DotCatcher, EpisodeFile
from titrl.errors import ShapeError
from titrl.training.common import Trajectory, returns_to_go


@dataclass
class DTConfig:
    steps: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_grad_norm: float = 1.0
    return_scale: float = 1.0
    gamma: float = 1.0
    seed: int = 0


@dataclass
class WindowBatch:
    returns_to_go: np.ndarray  # (B, K)
    observations: np.ndarray  # (B, K, *obs_shape)
    actions: np.ndarray  # (B, K)
    valid: np.ndarray  # (B, K)


class WindowDataset:
    """Every length-K window ending at each timestep, left-padded at episode starts."""

    def __init__(self, trajectories: Sequence[Trajectory], context_len: int, gamma: float = 1.0, return_scale: float = 1.0):
        if not trajectories:
            raise ValueError("dataset needs at least one trajectory")
        self.k = context_len
        self.trajectories = list(trajectories)
        self.rtg = [returns_to_go(t.rewards, gamma) / return_scale for t in self.trajectories]
        self.index = [(i, t) for i, traj in enumerate(self.trajectories) for t in range(len(traj.actions))]

    def __len__(self) -> int:
        return len(self.index)

    def get(self, items: Sequence[int]) -> WindowBatch:
        k = self.k
        obs_shape = self.trajectories[0].observations.shape[1:]
        b = len(items)
        rtg = np.zeros((b, k))
        obs = np.zeros((b, k) + obs_shape, dtype=np.float32)
        act = np.zeros((b, k), dtype=np.int64)
        valid = np.zeros((b, k), dtype=bool)
        for row, item in enumerate(items):
            i, end = self.index[item]
            traj = self.trajectories[i]
            start = max(0, end - k + 1)
            n = end - start + 1
            rtg[row, k - n :] = self.rtg[i][start : end + 1]
            obs[row, k - n :] = traj.observations[start : end + 1]
            act[row, k - n :] = traj.actions[start : end + 1]
            valid[row, k - n :] = True
        return WindowBatch(rtg, obs, act, valid)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where ``mask`` holds."""
    logp = log_softmax(logits)
    b, t = targets.shape
    bi, ti = np.nonzero(mask)
    if len(bi) == 0:
        raise ShapeError("no valid positions in batch")
    picked = logp[bi, ti, targets[bi, ti]]
    return -picked.mean()


def dt_train_step(model: DTModel, optimizer: Adam, batch: WindowBatch, max_grad_norm: float = 1.0) -> tuple[float, float]:
    """One gradient step on action cross-entropy; returns (loss, accuracy) before the step."""
    if batch.actions.shape[1] > model.cfg.context_len:
        raise ShapeError(f"window of {batch.actions.shape[1]} exceeds context_len {model.cfg.context_len}")
    optimizer.zero_grad()
    logits = dt_sequence_forward(model, batch.returns_to_go, batch.observations, batch.actions, batch.valid, training=True)
    loss = cross_entropy(logits, batch.actions, batch.valid)
    backward(loss)
    clip_grad_norm(optimizer.params, max_grad_norm)
    optimizer.step()
    pred = logits.data.argmax(axis=-1)
    acc = float((pred == batch.actions)[batch.valid].mean())
    return loss.item(), acc


def action_accuracy(model: DTModel, dataset: WindowDataset, batch_size: int = 256) -> float:
    """Fraction of logged actions predicted by argmax at the last position of every window."""
    hits = 0
    for start in range(0, len(dataset), batch_size):
        batch = dataset.get(range(start, min(start + batch_size, len(dataset))))
        with no_grad():
            logits = dt_sequence_forward(model, batch.returns_to_go, batch.observations, batch.actions[:, :-1], batch.valid)
        hits += int((logits.data[:, -1].argmax(axis=-1) == batch.actions[:, -1]).sum())
    return hits / len(dataset)


def train_dt(
    model: DTModel,
    dataset: WindowDataset,
    cfg: DTConfig,
    on_step: Callable[[int, float, float], None] | None = None,
) -> list[float]:
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.parameters(), lr=cfg.learning_rate)
    losses = []
    for step in range(cfg.steps):
        items = rng.integers(0, len(dataset), size=cfg.batch_size)
        loss, acc = dt_train_step(model, optimizer, dataset.get(items), cfg.max_grad_norm)
        losses.append(loss)
        if on_step is not None:
            on_step(step, loss, acc)
    return losses


def collect_expert_episodes(episodes: int, seed: int = 0, frame_size: int = 24) -> EpisodeFile:
    """Roll out the scripted DotCatcher policy; episode ``i`` uses seed ``seed + i``."""
    env = DotCatcher(frame_size)
    out = EpisodeFile(env.env_id, env.obs_shape, seed)
    for i in range(episodes):
        obs = env.reset(seed=seed + i)
        frames, actions, rewards = [], [], []
        while True:
            a = env.expert_action()
            res = env.step(a)
            frames.append(obs)
            actions.append(a)
            rewards.append(res.reward)
            obs = res.observation
            if res.done:
                break
        out.episodes.append(
            {"observations": np.stack(frames).astype(np.float32), "actions": np.asarray(actions), "rewards": np.asarray(rewards), "terminated": res.terminated}
        )
    return out


def trajectories_from(file: EpisodeFile) -> list[Trajectory]:
    return [Trajectory(ep["observations"], ep["actions"], ep["rewards"]) for ep in file.episodes]
