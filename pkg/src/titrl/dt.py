"""Return-conditioned sequence model with an inner Transformer observation encoder.

Each timestep contributes three tokens, in order: return-to-go, observation,
action. The observation token is the class feature of the inner Transformer
run on that observation's patches. The causal outer stack reads the
interleaved sequence and the action at timestep t is predicted from the
output at the observation token of t.
"""
from __future__ import annotations

import numpy as np

from titrl.autodiff import Module, Tensor, concat, init_linear, layer_norm, parameter, stack
from titrl.backbone import (
    EMBED_INIT_STD,
    HEAD_OUTPUT_SCALE,
    TITConfig,
    _outer_kwargs,
    action_head,
    embed_and_tokenize,
    inner_forward,
    observation_patches,
    preprocess,
)
from titrl.blocks import LN_EPS, AttentionRecord, BlockParams, decoder_block
from titrl.errors import ConfigError, ShapeError

TOKENS_PER_STEP = 3


class DTModel(Module):
    def __init__(self, cfg: TITConfig, seed: int = 0):
        cfg.validate()
        if cfg.action_kind != "discrete":
            raise ConfigError("the sequence model predicts discrete actions", key="action_kind")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, n = cfg.embed_dim, cfg.num_patches
        d_ff = cfg.ffn_ratio * d
        self.patch_embed = init_linear(rng, cfg.patch_dim, d)
        self.class_token = parameter(rng.normal(0.0, EMBED_INIT_STD, size=d))
        self.patch_pos = parameter(rng.normal(0.0, EMBED_INIT_STD, size=(n + 1, d)))
        self.inner_blocks = [BlockParams(d, cfg.inner_heads, d_ff, rng) for _ in range(cfg.num_blocks)]
        self.return_w = init_linear(rng, 1, d)
        self.return_b = parameter(np.zeros(d))
        self.action_embed = init_linear(rng, cfg.action_dim, d)
        self.embed_ln_gain = parameter(np.ones(d))
        self.embed_ln_bias = parameter(np.zeros(d))
        if cfg.outer_position_encoding:
            self.token_pos = parameter(rng.normal(0.0, EMBED_INIT_STD, size=(TOKENS_PER_STEP * cfg.context_len, d)))
        self.outer_blocks = [BlockParams(d, cfg.outer_heads, d_ff, rng) for _ in range(cfg.num_blocks)]
        self.head_w1 = init_linear(rng, d, d)
        self.head_b1 = parameter(np.zeros(d))
        self.head_w2 = init_linear(rng, d, cfg.action_dim, scale=HEAD_OUTPUT_SCALE)
        self.head_b2 = parameter(np.zeros(cfg.action_dim))


def token_count(timesteps: int, last_action_absent: bool) -> int:
    return TOKENS_PER_STEP * timesteps - (1 if last_action_absent else 0)


def dt_sequence_forward(
    model: DTModel,
    returns_to_go: np.ndarray,
    observations: np.ndarray,
    actions: np.ndarray | None,
    valid: np.ndarray | None = None,
    *,
    training: bool = False,
    rng: np.random.Generator | None = None,
    records: list[AttentionRecord] | None = None,
) -> Tensor:
    """Action logits ``(B, T, n_actions)`` predicted at every observation token.

    ``returns_to_go`` is ``(B, T)``, ``observations`` ``(B, T, *obs_shape)``
    and ``actions`` ``(B, T)`` integer (or ``(B, T-1)`` when the last action
    is the one being predicted). ``valid`` marks real (non-padding) timesteps.
    """
    cfg = model.cfg
    rtg = np.asarray(returns_to_go, dtype=np.float64)
    if rtg.ndim != 2 or rtg.shape[1] == 0:
        raise ShapeError("need a non-empty (B, T) return-to-go array")
    b, t = rtg.shape
    if t > cfg.context_len:
        raise ShapeError(f"context of {t} timesteps exceeds context_len {cfg.context_len}")
    obs = preprocess(observations, cfg)
    if obs.shape[:2] != (b, t) or obs.shape[2:] != cfg.obs_shape:
        raise ShapeError(f"observations must be (B, T, *{cfg.obs_shape}), got {obs.shape}")
    if actions is None:
        actions = np.zeros((b, 0), dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    if actions.shape[0] != b or actions.shape[1] not in (t - 1, t):
        raise ShapeError(f"actions must be (B, T) or (B, T-1), got {actions.shape}")
    if actions.size and (actions.min() < 0 or actions.max() >= cfg.action_dim):
        raise ValueError("action index out of range")
    last_absent = actions.shape[1] == t - 1
    valid = np.ones((b, t), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)

    z0 = embed_and_tokenize(observation_patches(obs, cfg), model)
    _, cls, _ = inner_forward(z0, model.inner_blocks, cfg, training=training, rng=rng, records=records)
    obs_tok = cls[..., 0, :]
    ret_tok = Tensor(rtg[..., None]) @ model.return_w + model.return_b
    onehot = np.eye(cfg.action_dim)[actions]
    act_tok = Tensor(onehot) @ model.action_embed
    if last_absent:
        pad = Tensor(np.zeros((b, 1, cfg.embed_dim)))
        act_tok = concat([act_tok, pad], axis=1)
    seq = stack([ret_tok, obs_tok, act_tok], axis=2).reshape(b, TOKENS_PER_STEP * t, cfg.embed_dim)
    n_tok = token_count(t, last_absent)
    seq = seq[:, :n_tok]
    if hasattr(model, "token_pos"):
        seq = seq + model.token_pos[:n_tok]
    seq = layer_norm(seq, model.embed_ln_gain, model.embed_ln_bias, LN_EPS)

    tok_valid = np.repeat(valid, TOKENS_PER_STEP, axis=1)[:, :n_tok]
    vis = tok_valid[:, None, :] | np.eye(n_tok, dtype=bool)
    y = seq
    for i, block in enumerate(model.outer_blocks):
        y = decoder_block(y, block, mask=vis, block_index=i, **_outer_kwargs(cfg, training, rng, records))
    obs_positions = np.arange(t) * TOKENS_PER_STEP + 1
    return action_head(model, y[:, obs_positions, :])
