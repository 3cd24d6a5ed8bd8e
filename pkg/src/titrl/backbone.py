"""Transformer-in-Transformer backbones.

An observation is cut into patches and encoded by the inner (spatial)
Transformer; the class token of every timestep in a K-step history feeds the
causal outer (temporal) Transformer. Five wirings are available through
``TITConfig.variant``:

``vanilla``   L inner blocks, then L outer blocks, head on the last outer row.
``enhanced``  inner block l and outer block l fused per layer; the last outer
              row of every layer is concatenated for the head (dense head).
``wo_dense``  enhanced without the dense head (last layer only).
``wo_inner``  outer blocks only, over linear whole-observation embeddings.
``wo_outer``  inner blocks only, over the K frames stacked as channels.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from titrl.autodiff import Module, Tensor, activation, concat, init_linear, parameter
from titrl.autodiff import weights as weight_io
from titrl.blocks import AttentionRecord, BlockParams, decoder_block, encoder_block
from titrl.errors import CheckpointError, ConfigError, ShapeError

VARIANTS = ("vanilla", "enhanced", "wo_dense", "wo_inner", "wo_outer")
ACTION_KINDS = ("discrete", "continuous")
EMBED_INIT_STD = 0.02
HEAD_OUTPUT_SCALE = 0.01


@dataclass
class TITConfig:
    obs_shape: tuple[int, ...] = (4,)
    patch_size: int = 1
    embed_dim: int = 32
    num_blocks: int = 2
    context_len: int = 1
    inner_heads: int = 1
    outer_heads: int = 1
    inner_attn_dropout: float = 0.0
    inner_ffn_dropout: float = 0.0
    outer_attn_dropout: float = 0.0
    outer_ffn_dropout: float = 0.0
    inner_activation: str = "gelu"
    outer_activation: str = "gelu"
    variant: str = "enhanced"
    outer_position_encoding: bool = False
    action_kind: str = "discrete"
    action_dim: int = 2
    ffn_ratio: int = 4

    def __post_init__(self):
        self.obs_shape = tuple(int(s) for s in self.obs_shape)
        self.validate()

    @property
    def obs_kind(self) -> str:
        return "image" if len(self.obs_shape) == 3 else "array"

    @property
    def obs_dim(self) -> int:
        return int(np.prod(self.obs_shape))

    @property
    def num_patches(self) -> int:
        if self.obs_kind == "image":
            h, w, _ = self.obs_shape
            return (h // self.patch_size) * (w // self.patch_size)
        return self.obs_shape[0]

    @property
    def patch_dim(self) -> int:
        """Length of one flattened patch, including frame stacking for ``wo_outer``."""
        frames = self.context_len if self.variant == "wo_outer" else 1
        if self.obs_kind == "image":
            return self.patch_size**2 * self.obs_shape[2] * frames
        return frames

    @property
    def head_input_dim(self) -> int:
        dense = self.variant in ("enhanced", "wo_inner", "wo_outer")
        return self.num_blocks * self.embed_dim if dense else self.embed_dim

    def validate(self) -> None:
        def positive(key):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, key)}", key=key)

        for key in ("patch_size", "embed_dim", "num_blocks", "context_len", "inner_heads", "outer_heads", "action_dim", "ffn_ratio"):
            positive(key)
        if len(self.obs_shape) not in (1, 3) or min(self.obs_shape) < 1:
            raise ConfigError(f"expected (D,) or (H, W, C), got {self.obs_shape}", key="obs_shape")
        if self.obs_kind == "image":
            h, w, _ = self.obs_shape
            if h % self.patch_size or w % self.patch_size:
                raise ConfigError(f"patch size {self.patch_size} does not divide {h}x{w}", key="patch_size")
        elif self.patch_size != 1:
            raise ConfigError("array observations use one entry per patch (patch_size = 1)", key="patch_size")
        for key in ("inner_heads", "outer_heads"):
            if self.embed_dim % getattr(self, key):
                raise ConfigError(f"{getattr(self, key)} does not divide embed_dim {self.embed_dim}", key=key)
        for key in ("inner_attn_dropout", "inner_ffn_dropout", "outer_attn_dropout", "outer_ffn_dropout"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError("must lie in [0, 1)", key=key)
        for key in ("inner_activation", "outer_activation"):
            if getattr(self, key) not in ("gelu", "relu", "tanh"):
                raise ConfigError(f"unknown activation {getattr(self, key)!r}", key=key)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}", key="variant")
        if self.action_kind not in ACTION_KINDS:
            raise ConfigError(f"unknown action kind {self.action_kind!r}", key="action_kind")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obs_shape"] = list(self.obs_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TITConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}", key=unknown[0])
        return cls(**d)


# -- observation patches ---------------------------------------------------------


def preprocess(obs: np.ndarray, cfg: TITConfig) -> np.ndarray:
    """Scale image pixels from [0, 255] to [0, 1]; array observations pass through."""
    obs = np.asarray(obs, dtype=np.float64)
    return obs / 255.0 if cfg.obs_kind == "image" else obs


def patchify(obs: np.ndarray, patch_size: int) -> np.ndarray:
    """Split observations into a patch sequence.

    Images ``(..., H, W, C)`` become ``(..., N, P*P*C)`` tiles in raster order,
    each tile flattened row-major over (row, col, channel). Arrays ``(..., D)``
    are handled by passing ``patch_size=None``: see :func:`patchify_array`.
    """
    obs = np.asarray(obs)
    *lead, h, w, c = obs.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"patch size {p} does not divide {h}x{w}", key="patch_size")
    tiles = obs.reshape(*lead, h // p, p, w // p, p, c)
    n = len(lead)
    tiles = tiles.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return tiles.reshape(*lead, (h // p) * (w // p), p * p * c)


def patchify_array(obs: np.ndarray) -> np.ndarray:
    """One patch of length 1 per entry: ``(..., D)`` becomes ``(..., D, 1)``."""
    return np.asarray(obs)[..., None]


def observation_patches(obs: np.ndarray, cfg: TITConfig) -> np.ndarray:
    obs = np.asarray(obs)
    if obs.shape[-len(cfg.obs_shape):] != cfg.obs_shape:
        raise ShapeError(f"observation shape {obs.shape} does not end with {cfg.obs_shape}")
    if cfg.obs_kind == "image":
        return patchify(obs, cfg.patch_size)
    return patchify_array(obs)


def stack_frames(obs: np.ndarray, cfg: TITConfig) -> np.ndarray:
    """DQN-style stacking of a ``(B, K, *obs_shape)`` window, oldest frame first.

    Images become ``(B, H, W, C*K)``; arrays become ``(B, D, K)`` so each
    entry's K-step history is one patch.
    """
    if cfg.obs_kind == "image":
        return np.concatenate([obs[:, k] for k in range(obs.shape[1])], axis=-1)
    return np.swapaxes(obs, 1, 2)


# -- parameters -------------------------------------------------------------------


class TITModel(Module):
    """Parameters of one backbone variant plus its action and value heads.

    Inner and outer blocks are single parameter sets per layer, applied to
    every timestep of the window, so the parameter count does not depend on K.
    """

    def __init__(self, cfg: TITConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, n = cfg.embed_dim, cfg.num_patches
        d_ff = cfg.ffn_ratio * d
        has_inner = cfg.variant != "wo_inner"
        has_outer = cfg.variant != "wo_outer"
        if has_inner:
            self.patch_embed = init_linear(rng, cfg.patch_dim, d)
            self.class_token = parameter(rng.normal(0.0, EMBED_INIT_STD, size=d))
            self.patch_pos = parameter(rng.normal(0.0, EMBED_INIT_STD, size=(n + 1, d)))
            self.inner_blocks = [BlockParams(d, cfg.inner_heads, d_ff, rng) for _ in range(cfg.num_blocks)]
        else:
            self.obs_embed = init_linear(rng, cfg.obs_dim, d)
            self.inner_blocks = []
        if has_outer:
            self.outer_blocks = [BlockParams(d, cfg.outer_heads, d_ff, rng) for _ in range(cfg.num_blocks)]
            if cfg.outer_position_encoding:
                self.temporal_pos = parameter(rng.normal(0.0, EMBED_INIT_STD, size=(cfg.context_len, d)))
        else:
            self.outer_blocks = []
        f = cfg.head_input_dim
        self.head_w1 = init_linear(rng, f, d)
        self.head_b1 = parameter(np.zeros(d))
        self.head_w2 = init_linear(rng, d, cfg.action_dim, scale=HEAD_OUTPUT_SCALE)
        self.head_b2 = parameter(np.zeros(cfg.action_dim))
        self.value_w = init_linear(rng, f, 1)
        self.value_b = parameter(np.zeros(1))
        if cfg.action_kind == "continuous":
            self.log_std = parameter(np.zeros(cfg.action_dim))

    def inner_parameter_count(self) -> int:
        return sum(b.num_parameters() for b in self.inner_blocks)

    def forward(
        self,
        obs: np.ndarray,
        valid: np.ndarray | None = None,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
        records: list[AttentionRecord] | None = None,
    ) -> "PolicyOutput":
        """Batched forward over windows ``obs`` of shape ``(B, K, *obs_shape)``."""
        feats = backbone_features(self, obs, valid, training=training, rng=rng, records=records)
        return PolicyOutput(action_head(self, feats), value_head(self, feats), feats)

    __call__ = forward


@dataclass
class PolicyOutput:
    action: Tensor  # logits (discrete) or means (continuous), (B, action_dim)
    value: Tensor  # (B,)
    features: Tensor  # (B, head_input_dim)
    records: list[AttentionRecord] = field(default_factory=list)


# -- forward pieces ---------------------------------------------------------------------


def embed_and_tokenize(patches: np.ndarray | Tensor, model: TITModel) -> Tensor:
    """Linear patch embedding, prepended class token, plus patch position table."""
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape[-1] != model.patch_embed.shape[0]:
        raise ShapeError(f"patch length {patches.shape[-1]} != embedding input {model.patch_embed.shape[0]}")
    if patches.shape[-2] + 1 != model.patch_pos.shape[0]:
        raise ShapeError(f"{patches.shape[-2]} patches but position table has {model.patch_pos.shape[0]} rows")
    embedded = patches @ model.patch_embed
    lead = embedded.shape[:-2]
    d = model.class_token.shape[0]
    cls = model.class_token.reshape((1,) * len(lead) + (1, d))
    if lead:
        cls = cls + Tensor(np.zeros(lead + (1, d)), dtype=embedded.dtype)
    return concat([cls, embedded], axis=-2) + model.patch_pos


def _inner_kwargs(cfg: TITConfig, training: bool, rng, records) -> dict:
    return dict(
        act=cfg.inner_activation,
        attn_dropout=cfg.inner_attn_dropout,
        ffn_dropout=cfg.inner_ffn_dropout,
        training=training,
        rng=rng,
        records=records,
    )


def _outer_kwargs(cfg: TITConfig, training: bool, rng, records) -> dict:
    return dict(
        act=cfg.outer_activation,
        attn_dropout=cfg.outer_attn_dropout,
        ffn_dropout=cfg.outer_ffn_dropout,
        training=training,
        rng=rng,
        records=records,
    )


def inner_forward(
    z0: Tensor,
    blocks: Sequence[BlockParams],
    cfg: TITConfig | None = None,
    *,
    training: bool = False,
    rng=None,
    records: list[AttentionRecord] | None = None,
    first_index: int = 0,
) -> tuple[Tensor, Tensor, list[AttentionRecord]]:
    """Apply encoder blocks in order; return final tokens, the class row, and records."""
    if not blocks:
        raise ValueError("inner_forward needs at least one block")
    cfg = cfg or TITConfig()
    records = records if records is not None else []
    z = z0
    for i, block in enumerate(blocks):
        z = encoder_block(z, block, block_index=first_index + i, **_inner_kwargs(cfg, training, rng, records))
    return z, z[..., 0:1, :], records


def outer_visibility(valid: np.ndarray) -> np.ndarray:
    """Key-visibility mask ``(..., K, K)`` for a validity vector ``(..., K)``.

    Invalid (pre-episode) keys are hidden. An invalid query row keeps only its
    own diagonal so its softmax stays defined; such rows never feed valid ones.
    """
    valid = np.asarray(valid, dtype=bool)
    k = valid.shape[-1]
    return valid[..., None, :] | np.eye(k, dtype=bool)


def assemble_outer_input(
    class_features: Tensor | Sequence[Tensor],
    valid: np.ndarray | None = None,
    temporal_pos: Tensor | None = None,
) -> Tensor:
    """Stack per-timestep class features oldest-first into ``(..., K, D)``.

    Invalid slots are zero-filled; hiding them from attention is the job of
    :func:`outer_visibility`.
    """
    if not isinstance(class_features, Tensor):
        class_features = concat([c.reshape(1, -1) if c.ndim == 1 else c for c in class_features], axis=-2)
    k = class_features.shape[-2]
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape[-1] != k:
            raise ShapeError(f"validity mask has {valid.shape[-1]} slots, expected {k}")
        if not valid[..., -1].all():
            raise ValueError("the newest history slot must hold the current observation")
        if not valid.all():
            class_features = class_features * valid[..., None].astype(class_features.dtype)
    if temporal_pos is not None:
        class_features = class_features + temporal_pos
    return class_features


def _windows(model: TITModel, obs, valid) -> tuple[np.ndarray, np.ndarray]:
    cfg = model.cfg
    obs = preprocess(obs, cfg)
    if obs.ndim == len(cfg.obs_shape) + 1:
        obs = obs[:, None]
    if obs.shape[1] != cfg.context_len or obs.shape[2:] != cfg.obs_shape:
        raise ShapeError(f"expected windows (B, {cfg.context_len}, *{cfg.obs_shape}), got {obs.shape}")
    if valid is None:
        valid = np.ones(obs.shape[:2], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if not valid[:, -1].all():
        raise ValueError("the newest history slot must hold the current observation")
    return obs, valid


def vanilla_features(model, obs, valid=None, *, training=False, rng=None, records=None, all_positions=False) -> Tensor:
    """Outer output at the newest slot, or at every slot ``(B, K, D)`` with ``all_positions``."""
    cfg = model.cfg
    obs, valid = _windows(model, obs, valid)
    z0 = embed_and_tokenize(observation_patches(obs, cfg), model)
    _, cls, _ = inner_forward(z0, model.inner_blocks, cfg, training=training, rng=rng, records=records)
    y = assemble_outer_input(cls[..., 0, :], valid, getattr(model, "temporal_pos", None))
    vis = outer_visibility(valid)
    for i, block in enumerate(model.outer_blocks):
        y = decoder_block(y, block, mask=vis, block_index=i, **_outer_kwargs(cfg, training, rng, records))
    return y if all_positions else y[..., -1, :]


def enhanced_features(model, obs, valid=None, *, dense=True, training=False, rng=None, records=None, all_positions=False) -> Tensor:
    cfg = model.cfg
    obs, valid = _windows(model, obs, valid)
    z = embed_and_tokenize(observation_patches(obs, cfg), model)
    vis = outer_visibility(valid)
    temporal_pos = getattr(model, "temporal_pos", None)
    per_layer = []
    for i, (inner, outer) in enumerate(zip(model.inner_blocks, model.outer_blocks)):
        z = encoder_block(z, inner, block_index=i, **_inner_kwargs(cfg, training, rng, records))
        y = assemble_outer_input(z[..., 0, :], valid, temporal_pos)
        y = decoder_block(y, outer, mask=vis, block_index=i, **_outer_kwargs(cfg, training, rng, records))
        per_layer.append(y if all_positions else y[..., -1, :])
    if not dense:
        return per_layer[-1]
    return per_layer[0] if len(per_layer) == 1 else concat(per_layer, axis=-1)


def wo_inner_features(model, obs, valid=None, *, training=False, rng=None, records=None) -> Tensor:
    cfg = model.cfg
    obs, valid = _windows(model, obs, valid)
    flat = Tensor(obs.reshape(obs.shape[0], obs.shape[1], -1))
    y = assemble_outer_input(flat @ model.obs_embed, valid, getattr(model, "temporal_pos", None))
    vis = outer_visibility(valid)
    per_layer = []
    for i, block in enumerate(model.outer_blocks):
        y = decoder_block(y, block, mask=vis, block_index=i, **_outer_kwargs(cfg, training, rng, records))
        per_layer.append(y[..., -1, :])
    return per_layer[0] if len(per_layer) == 1 else concat(per_layer, axis=-1)


def wo_outer_features(model, obs, valid=None, *, training=False, rng=None, records=None) -> Tensor:
    cfg = model.cfg
    obs, valid = _windows(model, obs, valid)
    obs = obs * valid.reshape(valid.shape + (1,) * len(cfg.obs_shape))
    stacked = stack_frames(obs, cfg)
    patches = patchify(stacked, cfg.patch_size) if cfg.obs_kind == "image" else stacked
    z = embed_and_tokenize(patches, model)
    per_layer = []
    for i, block in enumerate(model.inner_blocks):
        z = encoder_block(z, block, block_index=i, **_inner_kwargs(cfg, training, rng, records))
        per_layer.append(z[..., 0, :])
    return per_layer[0] if len(per_layer) == 1 else concat(per_layer, axis=-1)


def backbone_features(model: TITModel, obs, valid=None, **kw) -> Tensor:
    variant = model.cfg.variant
    if variant == "vanilla":
        return vanilla_features(model, obs, valid, **kw)
    if variant == "enhanced":
        return enhanced_features(model, obs, valid, **kw)
    if variant == "wo_dense":
        return enhanced_features(model, obs, valid, dense=False, **kw)
    if variant == "wo_inner":
        return wo_inner_features(model, obs, valid, **kw)
    if variant == "wo_outer":
        return wo_outer_features(model, obs, valid, **kw)
    raise ConfigError(f"unknown variant {variant!r}", key="variant")


def action_head(model: TITModel, features: Tensor) -> Tensor:
    hidden = activation(features @ model.head_w1 + model.head_b1, model.cfg.outer_activation)
    return hidden @ model.head_w2 + model.head_b2


def value_head(model: TITModel, features: Tensor) -> Tensor:
    return (features @ model.value_w + model.value_b)[..., 0]


def _single(history, model, variant_ok: Sequence[str], **kw):
    if model.cfg.variant not in variant_ok:
        raise ConfigError(f"model variant is {model.cfg.variant!r}, expected {variant_ok}", key="variant")
    obs, valid = history.window()
    records: list[AttentionRecord] = []
    out = model.forward(obs[None], valid[None], records=records, **kw)
    return out.action.data[0], float(out.value.data[0]), records


def vanilla_forward(history, model: TITModel, **kw):
    """Action output, value and attention records for one :class:`ObservationHistory`."""
    return _single(history, model, ("vanilla",), **kw)


def enhanced_forward(history, model: TITModel, **kw):
    return _single(history, model, ("enhanced", "wo_dense"), **kw)


def build_variant(cfg: TITConfig, seed: int = 0) -> TITModel:
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}", key="variant")
    return TITModel(cfg, seed)


# -- information flows ---------------------------------------------------------------


@dataclass(frozen=True)
class FlowCounts:
    spatial: int
    temporal: int
    s_s: int
    t_t: int
    s_t: int
    t_s: int

    def as_row(self) -> tuple[int, ...]:
        return (self.spatial, self.temporal, self.s_s, self.t_t, self.s_t, self.t_s)


def count_information_flows(num_blocks: int, context_len: int, variant: str) -> FlowCounts:
    """Horizontal and vertical information-flow counts of a TIT backbone.

    Vanilla: the K class tokens leave the inner stack once, so only one
    spatial-to-temporal hand-off per timestep. Enhanced: every layer hands off.
    """
    L, K = num_blocks, context_len
    if L < 1 or K < 1:
        raise ValueError("num_blocks and context_len must be >= 1")
    if variant == "vanilla":
        return FlowCounts(L * K, L, (L - 1) * K, L - 1, K, 0)
    if variant == "enhanced":
        return FlowCounts(L * K, L, (L - 1) * K, L, L * K, 0)
    raise ConfigError(f"flow counts exist for vanilla and enhanced, not {variant!r}", key="variant")


# -- checkpoints -------------------------------------------------------------------------

CHECKPOINT_FORMAT = "titrl-checkpoint"


def save_checkpoint(path: str | Path, model: Module, extra: dict | None = None) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "kind": type(model).__name__, "config": model.cfg.to_dict()}
    if extra:
        meta["extra"] = extra
    weight_io.save(path, model.state_dict(), json.dumps(meta, sort_keys=True))


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    tensors, meta_text = weight_io.load(path)
    try:
        meta = json.loads(meta_text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: checkpoint metadata is not JSON") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a titrl checkpoint")
    return tensors, meta


def load_checkpoint(path: str | Path) -> Module:
    tensors, meta = read_checkpoint(path)
    cfg = TITConfig.from_dict(meta["config"])
    if meta.get("kind") == "DTModel":
        from titrl.dt import DTModel

        model: Module = DTModel(cfg)
    else:
        model = TITModel(cfg)
    model.load_state_dict(tensors)
    return model
