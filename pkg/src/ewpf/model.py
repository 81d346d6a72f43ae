"""Encoder-decoder transformer for univariate multi-horizon forecasting.

The decoder is fed ``horizon`` learned query tokens (plus positional
encoding) and emits every horizon step in a single pass; there is no
autoregressive feedback of past targets.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import MultiHeadWeights, causal_mask, multi_head_attention
from .errors import ConfigError, ContractError
from .params import ModelParameters
from .tensor import Tensor

INIT_STD = 0.02
# inputs are expected in [-1, 1]; test splits may stray slightly past the train range
INPUT_SLACK = 0.25


@dataclass
class TransformerConfig:
    d_model: int = 512
    n_heads: int = 8
    n_layers: int = 8
    d_ff: int = 2048
    dropout_p: float = 0.1
    input_features: int = 1
    output_features: int = 1
    horizon: int = 1
    seq_len: int = 20
    tie_embeddings: bool = True
    eps_layernorm: float = 1e-5
    attn_dropout_p: float = 0.0

    def __post_init__(self):
        if self.d_model < 2 or self.d_model % 2:
            raise ConfigError(f"d_model must be a positive even number, got {self.d_model}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.n_layers < 0 or self.d_ff < 1:
            raise ConfigError("n_layers must be >= 0 and d_ff >= 1")
        if self.horizon < 1 or self.seq_len < 1:
            raise ConfigError("horizon and seq_len must be >= 1")
        if self.input_features != 1 or self.output_features != 1:
            raise ConfigError("only univariate input/output is supported")
        for p in (self.dropout_p, self.attn_dropout_p):
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PositionalEncoding:
    table: np.ndarray  # [max_len, d_model]

    @property
    def max_len(self) -> int:
        return self.table.shape[0]


def positional_encoding(max_len: int, d_model: int) -> PositionalEncoding:
    if d_model % 2:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / d_model)
    table = np.empty((max_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return PositionalEncoding(table)


@dataclass
class FeedForward:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class Norm:
    gain: Tensor
    bias: Tensor


@dataclass
class EncoderBlock:
    self_attn: MultiHeadWeights
    ffn: FeedForward
    norms: list[Norm] = field(default_factory=list)


@dataclass
class DecoderBlock:
    self_attn: MultiHeadWeights
    cross_attn: MultiHeadWeights
    ffn: FeedForward
    norms: list[Norm] = field(default_factory=list)


def ffn_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """max(0, x W1 + b1) W2 + b2, applied position-wise."""
    hidden = T.relu(T.add(T.matmul(x, w1), b1))
    return T.add(T.matmul(hidden, w2), b2)


def _sublayer(x: Tensor, y: Tensor, norm: Norm, cfg: TransformerConfig) -> Tensor:
    return T.layer_norm(T.add(x, y), norm.gain, norm.bias, cfg.eps_layernorm)


def embed(
    window: Tensor,
    proj: Tensor,
    pe: PositionalEncoding,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(window @ proj) * sqrt(d_model) + PE, for windows shaped (..., L, 1)."""
    length, d_model = window.shape[-2], proj.shape[-1]
    if length > pe.max_len:
        raise ContractError(f"window length {length} exceeds positional table ({pe.max_len})")
    x = T.scale(T.matmul(window, proj), math.sqrt(d_model))
    x = T.add_const(x, pe.table[:length])
    return T.dropout(x, dropout_p, training, rng)


def encoder_forward(
    x: Tensor,
    blocks: list[EncoderBlock],
    cfg: TransformerConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    p = cfg.dropout_p
    for blk in blocks:
        a = multi_head_attention(
            x, x, blk.self_attn, None, p, training, rng, attn_dropout_p=cfg.attn_dropout_p
        )
        x = _sublayer(x, a, blk.norms[0], cfg)
        f = ffn_forward(x, blk.ffn.w1, blk.ffn.b1, blk.ffn.w2, blk.ffn.b2)
        x = _sublayer(x, T.dropout(f, p, training, rng), blk.norms[1], cfg)
    return x


def decoder_forward(
    queries: Tensor,
    memory: Tensor,
    blocks: list[DecoderBlock],
    cfg: TransformerConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    p = cfg.dropout_p
    mask = causal_mask(queries.shape[-2])
    x = queries
    for blk in blocks:
        a = multi_head_attention(
            x, x, blk.self_attn, mask, p, training, rng, attn_dropout_p=cfg.attn_dropout_p
        )
        x = _sublayer(x, a, blk.norms[0], cfg)
        c = multi_head_attention(
            x, memory, blk.cross_attn, None, p, training, rng, attn_dropout_p=cfg.attn_dropout_p
        )
        x = _sublayer(x, c, blk.norms[1], cfg)
        f = ffn_forward(x, blk.ffn.w1, blk.ffn.b1, blk.ffn.w2, blk.ffn.b2)
        x = _sublayer(x, T.dropout(f, p, training, rng), blk.norms[2], cfg)
    return x


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.w_q", f"{prefix}.w_k", f"{prefix}.w_v", f"{prefix}.w_o"]


def init_parameters(cfg: TransformerConfig, seed: int = 0) -> ModelParameters:
    """Weights ~ N(0, 0.02^2); layer-norm gains 1; biases 0."""
    rng = np.random.default_rng(seed)
    d, dff = cfg.d_model, cfg.d_ff
    params = ModelParameters()

    def normal(name, shape):
        params.add(name, rng.normal(0.0, INIT_STD, size=shape))

    def attn(prefix):
        for name in _attn_names(prefix):
            normal(name, (d, d))

    def ffn(prefix):
        normal(f"{prefix}.w1", (d, dff))
        params.add(f"{prefix}.b1", np.zeros(dff))
        normal(f"{prefix}.w2", (dff, d))
        params.add(f"{prefix}.b2", np.zeros(d))

    def norm(prefix):
        params.add(f"{prefix}.gain", np.ones(d))
        params.add(f"{prefix}.bias", np.zeros(d))

    normal("embed.proj", (cfg.input_features, d))
    normal("decoder.queries", (cfg.horizon, d))
    for i in range(cfg.n_layers):
        attn(f"encoder.{i}.self_attn")
        ffn(f"encoder.{i}.ffn")
        norm(f"encoder.{i}.norm1")
        norm(f"encoder.{i}.norm2")
    for i in range(cfg.n_layers):
        attn(f"decoder.{i}.self_attn")
        attn(f"decoder.{i}.cross_attn")
        ffn(f"decoder.{i}.ffn")
        for j in (1, 2, 3):
            norm(f"decoder.{i}.norm{j}")
    if not cfg.tie_embeddings:
        normal("head.proj", (d, cfg.output_features))
    params.add("head.bias", np.zeros(cfg.output_features))
    return params


def expected_parameter_count(cfg: TransformerConfig) -> int:
    d, dff, n = cfg.d_model, cfg.d_ff, cfg.n_layers
    ffn = 2 * d * dff + dff + d
    enc = 4 * d * d + ffn + 2 * 2 * d
    dec = 8 * d * d + ffn + 3 * 2 * d
    head = 1 if cfg.tie_embeddings else d + 1
    return n * (enc + dec) + d + cfg.horizon * d + head


class Transformer:
    kind = "transformer"

    def __init__(self, cfg: TransformerConfig, params: ModelParameters | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg, seed)
        self.pe = positional_encoding(max(cfg.seq_len, cfg.horizon), cfg.d_model)
        p, h = self.params, cfg.n_heads

        def mha(prefix):
            return MultiHeadWeights(*(p[n] for n in _attn_names(prefix)), n_heads=h)

        def ffn(prefix):
            return FeedForward(p[f"{prefix}.w1"], p[f"{prefix}.b1"], p[f"{prefix}.w2"], p[f"{prefix}.b2"])

        def norm(prefix):
            return Norm(p[f"{prefix}.gain"], p[f"{prefix}.bias"])

        self.encoder = [
            EncoderBlock(
                mha(f"encoder.{i}.self_attn"),
                ffn(f"encoder.{i}.ffn"),
                [norm(f"encoder.{i}.norm1"), norm(f"encoder.{i}.norm2")],
            )
            for i in range(cfg.n_layers)
        ]
        self.decoder = [
            DecoderBlock(
                mha(f"decoder.{i}.self_attn"),
                mha(f"decoder.{i}.cross_attn"),
                ffn(f"decoder.{i}.ffn"),
                [norm(f"decoder.{i}.norm{j}") for j in (1, 2, 3)],
            )
            for i in range(cfg.n_layers)
        ]

    @property
    def input_proj(self) -> Tensor:
        return self.params["embed.proj"]

    @property
    def output_proj(self) -> Tensor:
        if self.cfg.tie_embeddings:
            return T.transpose(self.params["embed.proj"])
        return self.params["head.proj"]

    def forward(
        self, window, training: bool = False, rng: np.random.Generator | None = None
    ) -> Tensor:
        """Forecast ``(B, m, 1)`` from windows ``(B, L, 1)``; 2-D input gives ``(m, 1)``."""
        x = T.as_tensor(window)
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1, *x.shape))
        if x.ndim != 3 or x.shape[-1] != 1:
            raise ContractError(f"expected windows shaped (B, L, 1), got {x.shape}")
        if np.abs(x.data).max(initial=0.0) > 1.0 + INPUT_SLACK:
            warnings.warn("transformer input lies outside the normalised [-1, 1] range", RuntimeWarning)
        cfg = self.cfg
        batch = x.shape[0]
        src = embed(x, self.params["embed.proj"], self.pe, cfg.dropout_p, training, rng)
        memory = encoder_forward(src, self.encoder, cfg, training, rng)
        q = T.add_const(self.params["decoder.queries"], self.pe.table[: cfg.horizon])
        queries = T.dropout(T.expand(q, (batch,)), cfg.dropout_p, training, rng)
        dec = decoder_forward(queries, memory, self.decoder, cfg, training, rng)
        out = T.add(T.matmul(dec, self.output_proj), self.params["head.bias"])
        if single:
            out = T.reshape(out, out.shape[1:])
        return out

    __call__ = forward
