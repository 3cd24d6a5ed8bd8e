"""On-policy actor-critic training with a clipped surrogate objective."""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from titrl.autodiff import (
    Adam,
    Tensor,
    backward,
    clip,
    clip_grad_norm,
    exp,
    log_softmax,
    minimum,
    no_grad,
)
from titrl.backbone import TITModel
from titrl.envs import ObservationHistory
from titrl.errors import ConfigError, NumericalError
from titrl.training.common import MetricsWriter, compute_gae

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TrainConfig:
    total_timesteps: int = 100_000
    n_envs: int = 8
    rollout_len: int = 32
    minibatch_size: int = 256
    epochs: int = 20
    gamma: float = 0.98
    gae_lambda: float = 0.8
    clip_range: float = 0.2
    learning_rate: float = 1e-3
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    normalize_advantage: bool = True
    linear_schedule: bool = True
    seed: int = 0

    def validate(self) -> None:
        for key in ("total_timesteps", "n_envs", "rollout_len", "minibatch_size", "epochs"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", key=key)
        for key in ("gamma", "gae_lambda"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError("must lie in [0, 1]", key=key)
        if self.clip_range <= 0:
            raise ConfigError("must be > 0", key="clip_range")
        if self.learning_rate <= 0:
            raise ConfigError("must be > 0", key="learning_rate")


# -- action distributions ---------------------------------------------------------------


def log_prob_and_entropy(model: TITModel, action_out: Tensor, actions: np.ndarray) -> tuple[Tensor, Tensor]:
    if model.cfg.action_kind == "discrete":
        logp_all = log_softmax(action_out)
        idx = np.asarray(actions, dtype=np.int64)
        logp = logp_all[np.arange(len(idx)), idx]
        entropy = -(exp(logp_all) * logp_all).sum(axis=-1)
        return logp, entropy
    log_std = model.log_std
    diff = (Tensor(actions, dtype=action_out.dtype) - action_out) * exp(-log_std)
    logp = (-0.5 * diff * diff - log_std - 0.5 * _LOG_2PI).sum(axis=-1)
    entropy = (log_std + 0.5 * (1.0 + _LOG_2PI)).sum() * Tensor(np.ones(len(actions)), dtype=action_out.dtype)
    return logp, entropy


def sample_actions(model: TITModel, action_out: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if model.cfg.action_kind == "discrete":
        z = action_out - action_out.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random((len(p), 1))
        return np.minimum((p.cumsum(axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)
    std = np.exp(model.log_std.data)
    return action_out + std * rng.standard_normal(action_out.shape)


def clipped_surrogate(ratio: Tensor, advantages: np.ndarray, clip_range: float) -> Tensor:
    """Per-sample objective ``min(r A, clip(r, 1-eps, 1+eps) A)`` (to be maximized)."""
    adv = Tensor(advantages, dtype=ratio.dtype)
    return minimum(ratio * adv, clip(ratio, 1.0 - clip_range, 1.0 + clip_range) * adv)


# -- rollouts ----------------------------------------------------------------------------------


class RolloutBuffer:
    def __init__(self, rollout_len: int, n_envs: int, window_shape: tuple[int, ...], action_shape: tuple[int, ...] = ()):
        self.rollout_len, self.n_envs = rollout_len, n_envs
        self.windows = np.zeros((rollout_len, n_envs) + window_shape, dtype=np.float32)
        self.valid = np.zeros((rollout_len, n_envs, window_shape[0]), dtype=bool)
        self.actions = np.zeros((rollout_len, n_envs) + action_shape)
        self.log_probs = np.zeros((rollout_len, n_envs))
        self.rewards = np.zeros((rollout_len, n_envs))
        self.values = np.zeros((rollout_len, n_envs))
        self.dones = np.zeros((rollout_len, n_envs))
        self.advantages: np.ndarray | None = None
        self.returns: np.ndarray | None = None
        self.pos = 0

    @property
    def full(self) -> bool:
        return self.pos == self.rollout_len

    def add(self, windows, valid, actions, log_probs, rewards, values, dones) -> None:
        t = self.pos
        self.windows[t], self.valid[t], self.actions[t] = windows, valid, actions
        self.log_probs[t], self.rewards[t], self.values[t], self.dones[t] = log_probs, rewards, values, dones
        self.pos += 1

    def finish(self, last_values: np.ndarray, gamma: float, lam: float) -> None:
        self.advantages, self.returns = compute_gae(self.rewards, self.values, self.dones, last_values, gamma, lam)

    def flat(self) -> dict[str, np.ndarray]:
        if self.advantages is None:
            raise RuntimeError("advantages must be computed before the buffer is consumed")
        n = self.rollout_len * self.n_envs
        return {
            "windows": self.windows.reshape((n,) + self.windows.shape[2:]),
            "valid": self.valid.reshape(n, -1),
            "actions": self.actions.reshape((n,) + self.actions.shape[2:]),
            "log_probs": self.log_probs.reshape(n),
            "advantages": self.advantages.reshape(n),
            "returns": self.returns.reshape(n),
        }


def normalize(advantages: np.ndarray) -> np.ndarray:
    if len(advantages) < 2:
        return advantages
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def ppo_loss(model: TITModel, batch: dict, cfg: TrainConfig, rng: np.random.Generator | None = None, training: bool = True):
    """Total loss tensor plus its (policy, value, entropy) components as floats."""
    out = model.forward(batch["windows"], batch["valid"], training=training, rng=rng)
    logp, entropy = log_prob_and_entropy(model, out.action, batch["actions"])
    adv = normalize(batch["advantages"]) if cfg.normalize_advantage else batch["advantages"]
    ratio = exp(logp - Tensor(batch["log_probs"], dtype=logp.dtype))
    policy_loss = -clipped_surrogate(ratio, adv, cfg.clip_range).mean()
    err = out.value - Tensor(batch["returns"], dtype=out.value.dtype)
    value_loss = (err * err).mean()
    entropy_mean = entropy.mean()
    loss = policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * entropy_mean
    return loss, (policy_loss.item(), value_loss.item(), entropy_mean.item())


def ppo_update(model: TITModel, buffer: RolloutBuffer, cfg: TrainConfig, optimizer: Adam, rng: np.random.Generator) -> dict:
    data = buffer.flat()
    n = len(data["advantages"])
    stats = {"policy_loss": [], "value_loss": [], "entropy": []}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            batch = {k: v[idx] for k, v in data.items()}
            optimizer.zero_grad()
            loss, (pl, vl, ent) = ppo_loss(model, batch, cfg, rng)
            if not np.isfinite(loss.item()):
                raise NumericalError(f"non-finite PPO loss (policy {pl}, value {vl}, entropy {ent})")
            backward(loss)
            clip_grad_norm(optimizer.params, cfg.max_grad_norm)
            optimizer.step()
            stats["policy_loss"].append(pl)
            stats["value_loss"].append(vl)
            stats["entropy"].append(ent)
    return {k: float(np.mean(v)) for k, v in stats.items()}


class PPOTrainer:
    """Collects rollouts from ``n_envs`` environments and updates ``model`` in place."""

    def __init__(self, model: TITModel, env_factory: Callable[[], object], cfg: TrainConfig, metrics: MetricsWriter | None = None):
        cfg.validate()
        self.model, self.cfg = model, cfg
        self.metrics = metrics or MetricsWriter(None)
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = Adam(model.parameters(), lr=cfg.learning_rate)
        k = model.cfg.context_len
        self.envs = [env_factory() for _ in range(cfg.n_envs)]
        self.histories = [ObservationHistory(k, env.obs_shape) for env in self.envs]
        self.episode_returns: deque[float] = deque(maxlen=100)
        self._running = np.zeros(cfg.n_envs)
        self._episodes_started = 0
        for env, hist in zip(self.envs, self.histories):
            hist.push(env.reset(seed=self._next_seed()))
        action_shape = () if model.cfg.action_kind == "discrete" else (model.cfg.action_dim,)
        self.buffer_shape = ((k,) + tuple(model.cfg.obs_shape), action_shape)
        self.env_steps = 0
        self.updates = 0

    def _next_seed(self) -> int:
        seed = self.cfg.seed * 1_000_003 + self._episodes_started
        self._episodes_started += 1
        return seed

    def _windows(self) -> tuple[np.ndarray, np.ndarray]:
        frames, valid = zip(*(h.window() for h in self.histories))
        return np.stack(frames), np.stack(valid)

    def collect(self) -> RolloutBuffer:
        cfg, model = self.cfg, self.model
        buf = RolloutBuffer(cfg.rollout_len, cfg.n_envs, *self.buffer_shape)
        while not buf.full:
            windows, valid = self._windows()
            with no_grad():
                out = model.forward(windows, valid)
                actions = sample_actions(model, out.action.data, self.rng)
                logp, _ = log_prob_and_entropy(model, out.action, actions)
            rewards = np.zeros(cfg.n_envs)
            dones = np.zeros(cfg.n_envs)
            truncated_windows = []
            for i, (env, hist) in enumerate(zip(self.envs, self.histories)):
                a = int(actions[i]) if model.cfg.action_kind == "discrete" else actions[i]
                res = env.step(a)
                rewards[i] = res.reward
                self._running[i] += res.reward
                if res.done:
                    dones[i] = 1.0
                    self.episode_returns.append(self._running[i])
                    self._running[i] = 0.0
                    if res.truncated:
                        hist.push(res.observation)
                        truncated_windows.append((i, hist.window()))
                    hist.clear()
                    hist.push(env.reset(seed=self._next_seed()))
                else:
                    hist.push(res.observation)
            if truncated_windows:
                # time-limit cut: bootstrap from the value of the final observation
                idx = [i for i, _ in truncated_windows]
                w = np.stack([wv[0] for _, wv in truncated_windows])
                v = np.stack([wv[1] for _, wv in truncated_windows])
                with no_grad():
                    rewards[idx] += cfg.gamma * model.forward(w, v).value.data
            buf.add(windows, valid, actions, logp.data, rewards, out.value.data, dones)
            self.env_steps += cfg.n_envs
        windows, valid = self._windows()
        with no_grad():
            last_values = model.forward(windows, valid).value.data
        buf.finish(last_values, cfg.gamma, cfg.gae_lambda)
        return buf

    def train(self, total_timesteps: int | None = None, callback: Callable[["PPOTrainer"], None] | None = None) -> "PPOTrainer":
        budget = total_timesteps or self.cfg.total_timesteps
        while self.env_steps < budget:
            buf = self.collect()
            cfg = self.cfg
            if cfg.linear_schedule:
                # learning rate and clip range decay linearly to zero over the budget
                remaining = max(1.0 - (self.env_steps - buf.rollout_len * buf.n_envs) / budget, 0.0)
                cfg = replace(cfg, clip_range=cfg.clip_range * remaining)
                self.optimizer.lr = self.cfg.learning_rate * remaining
            stats = ppo_update(self.model, buf, cfg, self.optimizer, self.rng)
            self.updates += 1
            rets = np.asarray(self.episode_returns) if self.episode_returns else np.array([np.nan])
            self.metrics.write(
                env_steps=self.env_steps,
                updates=self.updates,
                mean_return=float(rets.mean()),
                std_return=float(rets.std()),
                **stats,
            )
            if self.updates % 20 == 0:
                log.info("steps=%d updates=%d mean_return=%.1f", self.env_steps, self.updates, rets.mean())
            if callback is not None:
                callback(self)
        return self
