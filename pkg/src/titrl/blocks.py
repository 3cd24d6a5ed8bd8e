"""Pre-norm Transformer encoder and causal decoder blocks.

All functions accept arbitrary leading batch axes: a token matrix has shape
``(..., n, d_model)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from titrl.autodiff import (
    Module,
    Tensor,
    activation,
    dropout,
    init_linear,
    layer_norm,
    masked_softmax,
    parameter,
)
from titrl.errors import ConfigError, ShapeError

LN_EPS = 1e-5


@dataclass
class AttentionRecord:
    """Attention probabilities of one head in one block.

    ``weights`` has shape ``(..., n_queries, n_keys)``; leading axes follow the
    batch layout of the forward pass that produced it.
    """

    block_index: int
    head_index: int
    weights: np.ndarray
    stage: str = ""


class BlockParams(Module):
    def __init__(self, d_model: int, heads: int, d_ff: int | None = None, rng: np.random.Generator | None = None):
        if heads < 1 or d_model % heads:
            raise ConfigError(f"heads={heads} must divide embed_dim={d_model}", key="heads")
        d_ff = d_ff or 4 * d_model
        rng = rng if rng is not None else np.random.default_rng(0)
        self.heads = heads
        self.ln1_gain = parameter(np.ones(d_model))
        self.ln1_bias = parameter(np.zeros(d_model))
        self.q_proj = init_linear(rng, d_model, d_model)
        self.k_proj = init_linear(rng, d_model, d_model)
        self.v_proj = init_linear(rng, d_model, d_model)
        self.out_proj = init_linear(rng, d_model, d_model)
        self.ln2_gain = parameter(np.ones(d_model))
        self.ln2_bias = parameter(np.zeros(d_model))
        self.ffn_w1 = init_linear(rng, d_model, d_ff)
        self.ffn_b1 = parameter(np.zeros(d_ff))
        self.ffn_w2 = init_linear(rng, d_ff, d_model)
        self.ffn_b2 = parameter(np.zeros(d_model))

    @property
    def d_model(self) -> int:
        return self.q_proj.shape[0]

    @classmethod
    def zeros(cls, d_model: int, heads: int, d_ff: int | None = None) -> "BlockParams":
        """All projections and biases zero, gains one: the block is an identity map."""
        p = cls(d_model, heads, d_ff)
        for name, t in p.named_parameters():
            t.data = np.ones_like(t.data) if "gain" in name else np.zeros_like(t.data)
        return p


def make_causal_mask(n: int) -> np.ndarray:
    """Boolean ``(n, n)`` matrix permitting key ``j`` for query ``i`` iff ``j <= i``."""
    if n < 1:
        raise ValueError("mask size must be at least 1")
    return np.tril(np.ones((n, n), dtype=bool))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, heads * dh)


def multi_head_self_attention(
    x: Tensor,
    p: BlockParams,
    mask: np.ndarray | None = None,
    *,
    attn_dropout: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    records: list[AttentionRecord] | None = None,
    block_index: int = 0,
    stage: str = "",
) -> Tensor:
    """Scaled dot-product attention over ``p.heads`` heads, then the output projection.

    ``mask`` is boolean, broadcastable to ``(..., n, n)``; True means the key
    is visible to the query. When ``records`` is given, one
    :class:`AttentionRecord` per head is appended to it.
    """
    if x.shape[-1] != p.d_model:
        raise ShapeError(f"attention input width {x.shape[-1]} != embed_dim {p.d_model}")
    heads = p.heads
    scale = 1.0 / math.sqrt(p.d_model // heads)
    q = _split_heads(x @ p.q_proj, heads)
    k = _split_heads(x @ p.k_proj, heads)
    v = _split_heads(x @ p.v_proj, heads)
    scores = (q @ k.swapaxes(-1, -2)) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim >= 3:
            mask = np.expand_dims(mask, -3)
    probs = masked_softmax(scores, mask)
    if records is not None:
        for h in range(heads):
            records.append(AttentionRecord(block_index, h, probs.data[..., h, :, :].copy(), stage))
    probs = dropout(probs, attn_dropout, training, rng)
    return _merge_heads(probs @ v) @ p.out_proj


def _block(
    z: Tensor,
    p: BlockParams,
    mask: np.ndarray | None,
    act: str,
    attn_dropout: float,
    ffn_dropout: float,
    training: bool,
    rng: np.random.Generator | None,
    records: list[AttentionRecord] | None,
    block_index: int,
    stage: str,
) -> Tensor:
    attended = multi_head_self_attention(
        layer_norm(z, p.ln1_gain, p.ln1_bias, LN_EPS),
        p,
        mask,
        attn_dropout=attn_dropout,
        training=training,
        rng=rng,
        records=records,
        block_index=block_index,
        stage=stage,
    )
    z_tilde = z + attended
    hidden = activation(layer_norm(z_tilde, p.ln2_gain, p.ln2_bias, LN_EPS) @ p.ffn_w1 + p.ffn_b1, act)
    hidden = dropout(hidden, ffn_dropout, training, rng)
    return z_tilde + (hidden @ p.ffn_w2 + p.ffn_b2)


def encoder_block(
    z_prev: Tensor,
    p: BlockParams,
    *,
    act: str = "gelu",
    attn_dropout: float = 0.0,
    ffn_dropout: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    records: list[AttentionRecord] | None = None,
    block_index: int = 0,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Unmasked block over the tokens of one observation (class token plus patches).

    ``mask`` is only for key padding; patches normally all see each other.
    """
    return _block(z_prev, p, mask, act, attn_dropout, ffn_dropout, training, rng, records, block_index, "inner")


def decoder_block(
    y_prev: Tensor,
    p: BlockParams,
    *,
    act: str = "gelu",
    attn_dropout: float = 0.0,
    ffn_dropout: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    records: list[AttentionRecord] | None = None,
    block_index: int = 0,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Causally masked block over a time-ordered token sequence.

    ``mask`` (optional) is an extra visibility mask combined with the causal one.
    """
    causal = make_causal_mask(y_prev.shape[-2])
    full = causal if mask is None else causal & np.asarray(mask, dtype=bool)
    return _block(y_prev, p, full, act, attn_dropout, ffn_dropout, training, rng, records, block_index, "outer")
