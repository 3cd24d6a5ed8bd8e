"""Seedable desk-scale environments and the K-step observation history."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from titrl.errors import CheckpointError, ConfigError, ShapeError


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated


class CartPole:
    """Cart-pole balancing with the public v1 constants and Euler integration."""

    env_id = "cartpole"
    obs_shape = (4,)
    num_actions = 2
    max_return = 500.0

    gravity = 9.8
    mass_cart = 1.0
    mass_pole = 0.1
    total_mass = mass_cart + mass_pole
    half_length = 0.5
    pole_mass_length = mass_pole * half_length
    force_mag = 10.0
    tau = 0.02
    theta_threshold = 12 * 2 * math.pi / 360
    x_threshold = 2.4
    horizon = 500

    def __init__(self):
        self.state = np.zeros(4)
        self.step_count = 0
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = self.rng.uniform(-0.05, 0.05, size=4)
        self.step_count = 0
        return self.state.astype(np.float32)

    def step(self, action: int) -> StepResult:
        if action not in (0, 1):
            raise ValueError(f"CartPole action must be 0 or 1, got {action!r}")
        x, x_dot, theta, theta_dot = self.state
        force = self.force_mag if action == 1 else -self.force_mag
        cos, sin = math.cos(theta), math.sin(theta)
        temp = (force + self.pole_mass_length * theta_dot**2 * sin) / self.total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.half_length * (4.0 / 3.0 - self.mass_pole * cos**2 / self.total_mass)
        )
        x_acc = temp - self.pole_mass_length * theta_acc * cos / self.total_mass
        x = x + self.tau * x_dot
        x_dot = x_dot + self.tau * x_acc
        theta = theta + self.tau * theta_dot
        theta_dot = theta_dot + self.tau * theta_acc
        self.state = np.array([x, x_dot, theta, theta_dot])
        self.step_count += 1
        terminated = bool(abs(x) > self.x_threshold or abs(theta) > self.theta_threshold)
        truncated = not terminated and self.step_count >= self.horizon
        return StepResult(self.state.astype(np.float32), 1.0, terminated, truncated)


class DotCatcher:
    """Catch falling balls with a paddle on a binary single-channel frame.

    A ball spawns in the top row with a hidden horizontal velocity of -1 or +1
    and falls one row per step, bouncing off the side walls. A frame shows
    where the ball is but not where it is heading, so one frame is ambiguous.
    Reward is +1 for a catch and -1 for a miss; an episode lasts 8 balls.
    Actions: 0 = left, 1 = stay, 2 = right.
    """

    env_id = "dotcatcher"
    num_actions = 3
    balls_per_episode = 8
    paddle_half_width = 1

    def __init__(self, size: int = 24):
        if size < 6:
            raise ConfigError("frame size must be at least 6", key="frame_size")
        self.size = size
        self.obs_shape = (size, size, 1)
        self.max_return = float(self.balls_per_episode)
        self.horizon = self.balls_per_episode * (size - 1)
        self.rng = np.random.default_rng(0)
        self.ball = np.zeros(2, dtype=np.int64)  # (row, col)
        self.ball_vx = 1
        self.paddle = size // 2
        self.balls_done = 0
        self.step_count = 0

    def _spawn(self) -> None:
        self.ball = np.array([0, self.rng.integers(0, self.size)], dtype=np.int64)
        self.ball_vx = int(self.rng.choice((-1, 1)))

    def render(self) -> np.ndarray:
        frame = np.zeros(self.obs_shape, dtype=np.uint8)
        lo = max(0, self.paddle - self.paddle_half_width)
        hi = min(self.size, self.paddle + self.paddle_half_width + 1)
        frame[self.size - 1, lo:hi, 0] = 255
        frame[self.ball[0], self.ball[1], 0] = 255
        return frame

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.paddle = self.size // 2
        self.balls_done = 0
        self.step_count = 0
        self._spawn()
        return self.render()

    @staticmethod
    def advance_column(col: int, vx: int, size: int) -> tuple[int, int]:
        nxt = col + vx
        if nxt < 0 or nxt >= size:
            vx = -vx
            nxt = col + vx
        return nxt, vx

    def landing_column(self) -> int:
        """Column where the current ball will reach the paddle row."""
        col, vx = int(self.ball[1]), self.ball_vx
        for _ in range(self.size - 1 - int(self.ball[0])):
            col, vx = self.advance_column(col, vx, self.size)
        return col

    def step(self, action: int) -> StepResult:
        if action not in (0, 1, 2):
            raise ValueError(f"DotCatcher action must be 0, 1 or 2, got {action!r}")
        self.paddle = int(np.clip(self.paddle + (action - 1), 0, self.size - 1))
        col, self.ball_vx = self.advance_column(int(self.ball[1]), self.ball_vx, self.size)
        self.ball = np.array([self.ball[0] + 1, col], dtype=np.int64)
        self.step_count += 1
        reward = 0.0
        if self.ball[0] == self.size - 1:
            caught = abs(int(self.ball[1]) - self.paddle) <= self.paddle_half_width
            reward = 1.0 if caught else -1.0
            self.balls_done += 1
            frame = self.render()
            terminated = self.balls_done >= self.balls_per_episode
            if not terminated:
                self._spawn()
                frame = self.render()
            return StepResult(frame, reward, terminated, False)
        return StepResult(self.render(), reward, False, False)

    def expert_action(self) -> int:
        """Scripted policy using only what two consecutive frames reveal.

        It waits while the ball sits in the spawn row (direction unknown),
        then heads for the landing column.
        """
        if self.ball[0] == 0:
            return 1
        target = self.landing_column()
        return int(np.sign(target - self.paddle)) + 1


def make_env(env_id: str, frame_size: int = 24):
    if env_id == "cartpole":
        return CartPole()
    if env_id == "dotcatcher":
        return DotCatcher(frame_size)
    raise ConfigError(f"unknown environment {env_id!r} (cartpole, dotcatcher)", key="env")


# -- observation history --------------------------------------------------------------


class ObservationHistory:
    """Ring buffer of the last K observations with a validity mask."""

    def __init__(self, capacity: int, obs_shape: tuple[int, ...]):
        if capacity < 1:
            raise ValueError("history capacity must be >= 1")
        self.capacity = capacity
        self.obs_shape = tuple(obs_shape)
        self._frames = np.zeros((capacity,) + self.obs_shape, dtype=np.float32)
        self._head = 0  # next write position
        self.pushes = 0

    def clear(self) -> None:
        self._frames[:] = 0
        self._head = 0
        self.pushes = 0

    def push(self, obs) -> "ObservationHistory":
        obs = np.asarray(obs)
        if obs.shape != self.obs_shape:
            raise ShapeError(f"observation shape {obs.shape} != history shape {self.obs_shape}")
        self._frames[self._head] = obs
        self._head = (self._head + 1) % self.capacity
        self.pushes += 1
        return self

    def window(self) -> tuple[np.ndarray, np.ndarray]:
        """Oldest-first ``(K, *obs_shape)`` frames (zeros where invalid) and validity mask."""
        order = (self._head + np.arange(self.capacity)) % self.capacity
        frames = self._frames[order].copy()
        valid = np.arange(self.capacity) >= self.capacity - min(self.pushes, self.capacity)
        return frames, valid


def history_push(history: ObservationHistory, obs) -> ObservationHistory:
    return history.push(obs)


def history_window(history: ObservationHistory) -> tuple[np.ndarray, np.ndarray]:
    return history.window()


# -- episode record files ---------------------------------------------------------------
#
# header:  b"TITE" | u8 version | u16 env_id length | env_id UTF-8 | u8 ndim | ndim x u32 | i64 seed
# record:  u32 payload length | payload
# payload: u32 episode index | i32 action | f32 reward | u8 flags (bit0 terminated, bit1 truncated)
#          | prod(obs_shape) x f32 observation
# All little-endian. Records are (o_t, a_t, r_t) in time order.

EPISODE_MAGIC = b"TITE"
EPISODE_VERSION = 1
_RECORD_HEAD = struct.Struct("<IifB")


@dataclass
class EpisodeFile:
    env_id: str
    obs_shape: tuple[int, ...]
    seed: int
    episodes: list[dict] = field(default_factory=list)  # each: observations, actions, rewards, terminated

    def write(self, path: str | Path) -> None:
        env = self.env_id.encode("utf-8")
        out = [EPISODE_MAGIC, struct.pack("<BH", EPISODE_VERSION, len(env)), env]
        out.append(struct.pack("<B", len(self.obs_shape)))
        out.append(struct.pack(f"<{len(self.obs_shape)}I", *self.obs_shape))
        out.append(struct.pack("<q", self.seed))
        for idx, ep in enumerate(self.episodes):
            n = len(ep["actions"])
            for t in range(n):
                last = t == n - 1
                flags = (1 if last and ep.get("terminated", True) else 0) | (2 if last and not ep.get("terminated", True) else 0)
                obs = np.ascontiguousarray(ep["observations"][t], dtype="<f4")
                if obs.shape != tuple(self.obs_shape):
                    raise ShapeError(f"observation {obs.shape} does not match header {self.obs_shape}")
                payload = _RECORD_HEAD.pack(idx, int(ep["actions"][t]), float(ep["rewards"][t]), flags) + obs.tobytes()
                out.append(struct.pack("<I", len(payload)))
                out.append(payload)
        Path(path).write_bytes(b"".join(out))

    @classmethod
    def read(cls, path: str | Path) -> "EpisodeFile":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"no such episode file: {path}")
        blob = path.read_bytes()
        if blob[:4] != EPISODE_MAGIC:
            raise CheckpointError(f"{path}: not an episode file")
        try:
            version, env_len = struct.unpack_from("<BH", blob, 4)
            if version != EPISODE_VERSION:
                raise CheckpointError(f"{path}: unsupported episode file version {version}")
            off = 7
            env_id = blob[off : off + env_len].decode("utf-8")
            off += env_len
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            (seed,) = struct.unpack_from("<q", blob, off)
            off += 8
            n_obs = int(np.prod(shape))
            episodes: dict[int, dict] = {}
            while off < len(blob):
                (length,) = struct.unpack_from("<I", blob, off)
                off += 4
                if length != _RECORD_HEAD.size + 4 * n_obs or off + length > len(blob):
                    raise CheckpointError(f"{path}: bad or truncated record at byte {off - 4}")
                idx, action, reward, flags = _RECORD_HEAD.unpack_from(blob, off)
                obs = np.frombuffer(blob, dtype="<f4", count=n_obs, offset=off + _RECORD_HEAD.size).reshape(shape)
                off += length
                ep = episodes.setdefault(idx, {"observations": [], "actions": [], "rewards": [], "terminated": True})
                ep["observations"].append(obs.astype(np.float32))
                ep["actions"].append(action)
                ep["rewards"].append(reward)
                if flags & 2:
                    ep["terminated"] = False
        except struct.error as exc:
            raise CheckpointError(f"{path}: truncated episode file") from exc
        eps = []
        for idx in sorted(episodes):
            ep = episodes[idx]
            eps.append(
                {
                    "observations": np.stack(ep["observations"]),
                    "actions": np.asarray(ep["actions"], dtype=np.int64),
                    "rewards": np.asarray(ep["rewards"], dtype=np.float64),
                    "terminated": ep["terminated"],
                }
            )
        return cls(env_id, tuple(shape), seed, eps)

    def __iter__(self) -> Iterator[dict]:
        return iter(self.episodes)
