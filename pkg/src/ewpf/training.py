"""Loss, Adam, and the epoch loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import tensor as T
from .baselines import RecurrentConfig, RecurrentForecaster
from .data import WindowedDataset
from .errors import ConfigError, ContractError, DataError, DivergenceError
from .model import Transformer, TransformerConfig
from .params import ModelParameters, save_checkpoint
from .tensor import Tape, Tensor

ALT_BETAS = (0.0, 0.5)
MODEL_KINDS = ("transformer", "lstm", "gru")

Model = Union[Transformer, RecurrentForecaster]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 50
    eps_adam: float = 1e-8
    seed: int = 0
    final_step_loss: bool = False
    eval_batch_size: int = 512

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"Adam betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of 1/2 (y - y_hat)^2 over every element."""
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = T.sub(pred, target)
    return T.scale(T.mean(T.mul(diff, diff)), 0.5)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParameters, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update from each parameter's ``.grad``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)


@dataclass
class TrainingHistory:
    train_mse: list[float] = field(default_factory=list)
    test_mse: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_mse)

    def append(self, train_mse: float, test_mse: float, seconds: float) -> None:
        self.train_mse.append(train_mse)
        self.test_mse.append(test_mse)
        self.seconds.append(seconds)

    def to_csv(self, path, with_seconds: bool = True) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "test_mse"] + (["seconds"] if with_seconds else []))
            for i in range(len(self)):
                row = [i + 1, repr(self.train_mse[i]), repr(self.test_mse[i])]
                if with_seconds:
                    row.append(f"{self.seconds[i]:.3f}")
                w.writerow(row)
        return path


def build_model(kind: str, model_cfg, params: ModelParameters | None = None, seed: int = 0) -> Model:
    kind = kind.lower()
    if kind == "transformer":
        if not isinstance(model_cfg, TransformerConfig):
            raise ConfigError("transformer needs a TransformerConfig")
        return Transformer(model_cfg, params, seed)
    if kind in ("lstm", "gru"):
        if not isinstance(model_cfg, RecurrentConfig) or model_cfg.cell != kind:
            raise ConfigError(f"{kind} needs a RecurrentConfig with cell={kind!r}")
        return RecurrentForecaster(model_cfg, params, seed)
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def predict(model: Model, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Inference-mode forecasts ``(N, m, 1)`` for windows ``(N, L, 1)``."""
    out = [model.forward(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


def _loss_view(pred: Tensor, y: np.ndarray, final_step: bool):
    if final_step:
        return pred[:, -1:, :], y[:, -1:, :]
    return pred, y


def train_epoch(
    model: Model,
    dataset: WindowedDataset,
    state: AdamState,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """One pass of shuffled mini-batches; returns the mean (unhalved) train MSE."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        xb, yb = dataset.x[idx], dataset.y[idx]
        model.params.zero_grad()
        with Tape() as tape:
            pred = model.forward(xb, training=True, rng=rng)
            loss = mse_loss(*_loss_view(pred, yb, cfg.final_step_loss))
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at adam step {state.t + 1}")
        tape.backward(loss)
        adam_step(model.params, state, cfg)
        total += 2.0 * value * len(idx)
    return total / n


def dataset_mse(model: Model, dataset: WindowedDataset, batch_size: int = 512) -> float:
    pred = predict(model, dataset.x, batch_size)
    return float(np.mean((pred - dataset.y) ** 2))


def fit(
    model_kind: str,
    train: WindowedDataset,
    test: WindowedDataset | None,
    train_cfg: TrainConfig,
    model_cfg,
    checkpoint_path=None,
    checkpoint_meta: dict | None = None,
) -> tuple[Model, TrainingHistory]:
    """Train from a fresh seeded initialisation, scoring the test set each epoch.

    The test score is recorded only; it never influences training.
    """
    model = build_model(model_kind, model_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng([train_cfg.seed, 1])
    state = AdamState()
    history = TrainingHistory()
    for _ in range(train_cfg.epochs):
        t0 = time.perf_counter()
        train_mse = train_epoch(model, train, state, train_cfg, rng)
        test_mse = dataset_mse(model, test, train_cfg.eval_batch_size) if test is not None and len(test) else float("nan")
        history.append(train_mse, test_mse, time.perf_counter() - t0)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, checkpoint_header(model, train_cfg, checkpoint_meta), model.params)
    return model, history


def checkpoint_header(model: Model, train_cfg: TrainConfig | None = None, extra: dict | None = None) -> dict:
    meta = {"kind": model.kind}
    for k, v in model.cfg.to_dict().items():
        meta[f"model.{k}"] = v
    if train_cfg is not None:
        for k, v in train_cfg.to_dict().items():
            meta[f"train.{k}"] = v
    meta.update(extra or {})
    return meta


def model_from_checkpoint(meta: dict, params: ModelParameters) -> Model:
    kind = meta.get("kind")
    fields = {k[len("model."):]: v for k, v in meta.items() if k.startswith("model.")}
    if kind == "transformer":
        cfg = TransformerConfig(**fields)
    elif kind in ("lstm", "gru"):
        cfg = RecurrentConfig(**fields)
    else:
        raise DataError(f"checkpoint records unknown model kind {kind!r}")
    return build_model(kind, cfg, params)
