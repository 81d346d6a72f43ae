"""Scaled dot-product and multi-head attention, plus the causal mask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

# additive bias for disallowed positions; exp() of it underflows to exactly 0
MASK_BIAS = -1e30


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray  # bool [L_q, L_k]

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape

    def bias(self) -> np.ndarray:
        return np.where(self.allowed, 0.0, MASK_BIAS)


def causal_mask(n: int) -> AttentionMask:
    """Lower-triangular mask: query ``i`` may see keys ``j <= i``."""
    if n < 1:
        raise ContractError(f"causal mask size must be >= 1, got {n}")
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)))


@dataclass
class MultiHeadWeights:
    """Fused per-role projections; head ``i`` owns columns ``i*d_k:(i+1)*d_k``."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    def __post_init__(self):
        d_model = self.w_q.shape[0]
        if self.n_heads < 1 or d_model % self.n_heads:
            raise ConfigError(f"{self.n_heads} heads do not divide d_model={d_model}")
        for w in (self.w_q, self.w_k, self.w_v, self.w_o):
            if w.shape != (d_model, d_model):
                raise DimensionError(f"projection shape {w.shape} != ({d_model}, {d_model})")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_v(self) -> int:
        return self.d_k

    def tensors(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]


def scaled_dot_product_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: AttentionMask | None = None,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ / sqrt(d_k) + mask) v over the last two axes.

    Leading axes (batch, heads) must agree between q, k and v.  Returns the
    output and the attention weights.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        lq, lk = q.shape[-2], k.shape[-2]
        if mask.shape != (lq, lk):
            raise DimensionError(f"mask shape {mask.shape} != ({lq}, {lk})")
        if not mask.allowed.any(axis=1).all():
            raise ContractError("a query row has no allowed key positions")
        scores = T.add_const(scores, mask.bias())
    weights = T.softmax_lastdim(scores)
    attended = T.dropout(weights, dropout_p, training, rng)
    return T.matmul(attended, v), weights


def _split_heads(x: Tensor, h: int) -> Tensor:
    # (..., L, d) -> (..., h, L, d/h)
    *lead, length, d = x.shape
    return T.swapaxes(T.reshape(x, (*lead, length, h, d // h)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., h, L, d_k) -> (..., L, h*d_k)
    *lead, h, length, dk = x.shape
    return T.reshape(T.swapaxes(x, -2, -3), (*lead, length, h * dk))


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    w: MultiHeadWeights,
    mask: AttentionMask | None = None,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    attn_dropout_p: float = 0.0,
) -> Tensor:
    d = w.d_model
    if x_q.shape[-1] != d or x_kv.shape[-1] != d:
        raise DimensionError(f"inputs {x_q.shape}, {x_kv.shape} do not end in d_model={d}")
    h = w.n_heads
    q = _split_heads(T.matmul(x_q, w.w_q), h)
    k = _split_heads(T.matmul(x_kv, w.w_k), h)
    v = _split_heads(T.matmul(x_kv, w.w_v), h)
    heads, _ = scaled_dot_product_attention(q, k, v, mask, attn_dropout_p, training, rng)
    out = T.matmul(_merge_heads(heads), w.w_o)
    return T.dropout(out, dropout_p, training, rng)
