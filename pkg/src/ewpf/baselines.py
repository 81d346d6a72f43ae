"""Stacked LSTM and GRU forecasters sharing the transformer's I/O contract.

Gate layouts (columns of the fused matrices):

* LSTM ``w_ih``/``w_hh``/``bias``: input, forget, candidate, output.
* GRU  ``w_ih``/``bias``: update, reset, candidate; ``w_hh_gates`` covers
  update and reset, ``w_hh_cand`` multiplies the reset-gated state
  (reset applied before the recurrent matmul).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .params import ModelParameters
from .tensor import Tensor

CELLS = ("lstm", "gru")


@dataclass
class RecurrentConfig:
    hidden: int = 512
    layers: int = 8
    cell: str = "lstm"
    horizon: int = 1
    seq_len: int = 20

    def __post_init__(self):
        self.cell = self.cell.lower()
        if self.cell not in CELLS:
            raise ConfigError(f"unknown recurrent cell {self.cell!r}; expected one of {CELLS}")
        if self.hidden < 1 or self.layers < 1:
            raise ConfigError("hidden and layers must be >= 1")
        if self.horizon < 1 or self.seq_len < 1:
            raise ConfigError("horizon and seq_len must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LstmLayer:
    w_ih: Tensor  # [in, 4H]
    w_hh: Tensor  # [H, 4H]
    bias: Tensor  # [4H]

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]


@dataclass
class GruLayer:
    w_ih: Tensor  # [in, 3H]
    w_hh_gates: Tensor  # [H, 2H]
    w_hh_cand: Tensor  # [H, H]
    bias: Tensor  # [3H]

    @property
    def hidden(self) -> int:
        return self.w_hh_cand.shape[0]


def lstm_cell_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, layer: LstmLayer) -> tuple[Tensor, Tensor]:
    H = layer.hidden
    z = T.add(T.add(T.matmul(x_t, layer.w_ih), T.matmul(h_prev, layer.w_hh)), layer.bias)
    i = T.sigmoid(z[..., 0:H])
    f = T.sigmoid(z[..., H : 2 * H])
    g = T.tanh(z[..., 2 * H : 3 * H])
    o = T.sigmoid(z[..., 3 * H : 4 * H])
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    h = T.mul(o, T.tanh(c))
    return h, c


def gru_cell_step(x_t: Tensor, h_prev: Tensor, layer: GruLayer) -> Tensor:
    H = layer.hidden
    xz = T.add(T.matmul(x_t, layer.w_ih), layer.bias)
    hz = T.matmul(h_prev, layer.w_hh_gates)
    z = T.sigmoid(T.add(xz[..., 0:H], hz[..., 0:H]))
    r = T.sigmoid(T.add(xz[..., H : 2 * H], hz[..., H : 2 * H]))
    cand = T.tanh(T.add(xz[..., 2 * H : 3 * H], T.matmul(T.mul(r, h_prev), layer.w_hh_cand)))
    # (1 - z) * h_prev + z * cand
    return T.add(h_prev, T.mul(z, T.sub(cand, h_prev)))


def init_recurrent_parameters(cfg: RecurrentConfig, seed: int = 0) -> ModelParameters:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    H = cfg.hidden
    bound = 1.0 / np.sqrt(H)
    params = ModelParameters()

    def uniform(name, shape):
        params.add(name, rng.uniform(-bound, bound, size=shape))

    for layer in range(cfg.layers):
        n_in = 1 if layer == 0 else H
        prefix = f"{cfg.cell}.{layer}"
        if cfg.cell == "lstm":
            uniform(f"{prefix}.w_ih", (n_in, 4 * H))
            uniform(f"{prefix}.w_hh", (H, 4 * H))
            params.add(f"{prefix}.bias", np.zeros(4 * H))
        else:
            uniform(f"{prefix}.w_ih", (n_in, 3 * H))
            uniform(f"{prefix}.w_hh_gates", (H, 2 * H))
            uniform(f"{prefix}.w_hh_cand", (H, H))
            params.add(f"{prefix}.bias", np.zeros(3 * H))
    uniform("head.w", (H, cfg.horizon))
    params.add("head.bias", np.zeros(cfg.horizon))
    return params


class RecurrentForecaster:
    """Stacked recurrent encoder whose last top-layer state feeds a linear head."""

    def __init__(self, cfg: RecurrentConfig, params: ModelParameters | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_recurrent_parameters(cfg, seed)
        p = self.params
        if cfg.cell == "lstm":
            self.layers = [
                LstmLayer(p[f"lstm.{i}.w_ih"], p[f"lstm.{i}.w_hh"], p[f"lstm.{i}.bias"])
                for i in range(cfg.layers)
            ]
        else:
            self.layers = [
                GruLayer(
                    p[f"gru.{i}.w_ih"], p[f"gru.{i}.w_hh_gates"], p[f"gru.{i}.w_hh_cand"], p[f"gru.{i}.bias"]
                )
                for i in range(cfg.layers)
            ]

    @property
    def kind(self) -> str:
        return self.cfg.cell

    def forward(self, window, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Forecast ``(B, m, 1)`` from ``(B, L, 1)``; 2-D input gives ``(m, 1)``.

        ``training``/``rng`` are accepted for interface parity; the recurrent
        baselines use no dropout.
        """
        x = T.as_tensor(window)
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1, *x.shape))
        if x.ndim != 3 or x.shape[-1] != 1:
            raise ContractError(f"expected windows shaped (B, L, 1), got {x.shape}")
        batch, length = x.shape[0], x.shape[1]
        H = self.cfg.hidden
        seq = [x[:, t, :] for t in range(length)]
        for layer in self.layers:
            h = T.zeros((batch, H))
            c = T.zeros((batch, H))
            outs = []
            for x_t in seq:
                if self.cfg.cell == "lstm":
                    h, c = lstm_cell_step(x_t, h, c, layer)
                else:
                    h = gru_cell_step(x_t, h, layer)
                outs.append(h)
            seq = outs
        y = T.add(T.matmul(seq[-1], self.params["head.w"]), self.params["head.bias"])
        y = T.reshape(y, (batch, self.cfg.horizon, 1))
        if single:
            y = T.reshape(y, y.shape[1:])
        return y

    __call__ = forward


def recurrent_forecast(window, params: ModelParameters, cfg: RecurrentConfig) -> Tensor:
    return RecurrentForecaster(cfg, params).forward(window)
