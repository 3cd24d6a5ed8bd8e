"""Run configuration: a strict ``key = value`` text format.

File format
-----------
* UTF-8 text, one ``key = value`` pair per line.
* ``#`` starts a comment that runs to the end of the line. Blank lines are ignored.
* Keys are the field names listed in ``FIELDS``; a key may appear at most once.
* Values: integers (``12``), floats (``1e-3``), booleans (``true``/``false``),
  bare strings (``cartpole``) and integer lists (``0, 1, 2``).

Anything else (unknown key, wrong type, failed constraint) raises
``ConfigError`` naming the key. Command-line flags override file values and
are parsed with the same rules.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from titrl.backbone import TITConfig
from titrl.envs import make_env
from titrl.errors import ConfigError
from titrl.training.ppo import TrainConfig

_MODEL_KEYS = (
    "variant", "embed_dim", "num_blocks", "context_len", "patch_size", "inner_heads", "outer_heads",
    "inner_attn_dropout", "inner_ffn_dropout", "outer_attn_dropout", "outer_ffn_dropout",
    "inner_activation", "outer_activation", "outer_position_encoding", "ffn_ratio",
)
_TRAIN_KEYS = (
    "total_timesteps", "n_envs", "rollout_len", "minibatch_size", "epochs", "gamma", "gae_lambda",
    "clip_range", "learning_rate", "ent_coef", "vf_coef", "max_grad_norm", "normalize_advantage",
    "linear_schedule",
)


@dataclass
class RunConfig:
    # environment and bookkeeping
    env: str = "cartpole"
    frame_size: int = 24
    out_dir: str = "runs/default"
    seeds: tuple[int, ...] = (0,)
    eval_episodes: int = 100
    record_wall_clock: bool = False
    # backbone
    variant: str = "enhanced"
    embed_dim: int = 32
    num_blocks: int = 2
    context_len: int = 1
    patch_size: int = 1
    inner_heads: int = 1
    outer_heads: int = 1
    inner_attn_dropout: float = 0.0
    inner_ffn_dropout: float = 0.0
    outer_attn_dropout: float = 0.0
    outer_ffn_dropout: float = 0.0
    inner_activation: str = "gelu"
    outer_activation: str = "gelu"
    outer_position_encoding: bool = False
    ffn_ratio: int = 4
    # online training
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
    # offline (return-conditioned) training
    dt_steps: int = 500
    dt_batch_size: int = 32
    dt_learning_rate: float = 1e-3
    dt_return_scale: float = 1.0
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    def validate(self) -> "RunConfig":
        if self.env not in ("cartpole", "dotcatcher"):
            raise ConfigError(f"unknown environment {self.env!r} (cartpole, dotcatcher)", key="env")
        if not self.seeds:
            raise ConfigError("need at least one seed", key="seeds")
        if len(set(self.seeds)) != len(self.seeds) or min(self.seeds) < 0:
            raise ConfigError("seeds must be distinct non-negative integers", key="seeds")
        if self.eval_episodes < 0:
            raise ConfigError("must be >= 0", key="eval_episodes")
        for key in ("dt_steps", "dt_batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError("must be >= 1", key=key)
        for key in ("dt_learning_rate", "dt_return_scale"):
            if getattr(self, key) <= 0:
                raise ConfigError("must be > 0", key=key)
        if self.env == "dotcatcher" and self.frame_size < 6:
            raise ConfigError("frame size must be at least 6", key="frame_size")
        self.model_config()
        self.train_config(self.seeds[0]).validate()
        return self

    def make_env(self):
        return make_env(self.env, self.frame_size)

    def env_factory(self):
        env_id, size = self.env, self.frame_size
        return lambda: make_env(env_id, size)

    def model_config(self, **changes) -> TITConfig:
        env = self.make_env()
        values = {k: getattr(self, k) for k in _MODEL_KEYS}
        values.update(changes)
        return TITConfig(obs_shape=env.obs_shape, action_dim=env.num_actions, **values)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **{k: getattr(self, k) for k in _TRAIN_KEYS})


FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "extra"}
_TYPES = {name: f.type for name, f in FIELDS.items()}


def _parse_value(key: str, text: str):
    kind = _TYPES[key]
    text = text.strip()
    if text == "":
        raise ConfigError("missing value", key=key)
    if kind == "bool":
        if text not in ("true", "false"):
            raise ConfigError(f"expected true or false, got {text!r}", key=key)
        return text == "true"
    if kind == "int":
        try:
            return int(text, 10)
        except ValueError:
            raise ConfigError(f"expected an integer, got {text!r}", key=key) from None
    if kind == "float":
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"expected a number, got {text!r}", key=key) from None
    if kind == "str":
        if any(c.isspace() for c in text) or "=" in text:
            raise ConfigError(f"expected a bare word, got {text!r}", key=key)
        return text
    # integer list
    try:
        return tuple(int(part, 10) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}", key=key) from None


def parse_pairs(text: str, source: str = "<config>") -> dict:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}", key=line.split()[0])
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key", key=key)
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key", key=key)
        values[key] = _parse_value(key, value)
    return values


def parse_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then string ``overrides``; validated before returning."""
    values: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"no such config file: {path}", key="config")
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError:
            raise ConfigError(f"{path} is not UTF-8", key="config") from None
        values.update(parse_pairs(text, str(path)))
    for key, text in (overrides or {}).items():
        if key not in FIELDS:
            raise ConfigError("unknown key", key=key)
        values[key] = _parse_value(key, str(text))
    return RunConfig(**values).validate()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_config(cfg: RunConfig) -> str:
    """Every key with its effective value, plus derived quantities as comments."""
    model = cfg.model_config()
    lines = ["# effective run configuration"]
    for name in FIELDS:
        lines.append(f"{name} = {_format(getattr(cfg, name))}")
    lines += [
        "# derived",
        f"# obs_shape = {'x'.join(str(s) for s in model.obs_shape)}",
        f"# num_patches = {model.num_patches}",
        f"# patch_dim = {model.patch_dim}",
        f"# head_input_dim = {model.head_input_dim}",
        f"# action_dim = {model.action_dim}",
    ]
    return "\n".join(lines) + "\n"


def write_echo(cfg: RunConfig, directory: str | Path) -> Path:
    path = Path(directory) / "config.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(echo_config(cfg), encoding="utf-8")
    return path
