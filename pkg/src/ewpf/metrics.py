"""Forecast accuracy metrics and the per-cell report record."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Scaler, WindowedDataset

EPS_MAPE = 1e-6


@dataclass
class MetricsReport:
    model: str
    seq_len: int
    horizon: int
    mse: float = float("nan")
    mae: float = float("nan")
    mape: float = float("nan")
    r2: float = float("nan")  # nan when the targets are constant
    n_test_samples: int = 0
    mape_excluded: int = 0
    error: str | None = None
    per_step: list[dict] = field(default_factory=list)

    @property
    def step_label(self) -> str:
        return "Single-step" if self.horizon == 1 else "Multi-step"

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(y, y_hat, eps_mape: float = EPS_MAPE) -> dict:
    """MSE, MAE, MAPE (fraction, |y| > eps_mape only) and R² about mean(y)."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape or y.size == 0:
        raise ValueError(f"need equal, non-empty target/prediction vectors: {y.shape} vs {y_hat.shape}")
    err = y - y_hat
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    keep = np.abs(y) > eps_mape
    mape = float(np.mean(np.abs(err[keep]) / np.abs(y[keep]))) if keep.any() else float("nan")
    ss_res = float(np.sum(err * err))
    centred = y - y.mean()
    ss_tot = float(np.sum(centred * centred))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return {
        "mse": mse,
        "mae": mae,
        "mape": mape,
        "r2": r2,
        "n": int(y.size),
        "mape_excluded": int(y.size - keep.sum()),
    }


def evaluate(
    model,
    test: WindowedDataset,
    scaler: Scaler | None = None,
    per_step: bool = False,
    batch_size: int = 512,
    predictions: np.ndarray | None = None,
) -> MetricsReport:
    """Score the final horizon step on ``test`` (normalised units unless ``scaler``).

    With a scaler, targets and forecasts are mapped back to physical units
    before scoring.  ``per_step`` adds one metrics dict per horizon step.
    """
    from .training import predict

    if len(test) == 0:
        raise ValueError("test set is empty")
    pred = predict(model, test.x, batch_size) if predictions is None else predictions
    y, y_hat = test.y[..., 0], pred[..., 0]
    if scaler is not None:
        y, y_hat = scaler.inverse_transform(y), scaler.inverse_transform(y_hat)
    m = compute_metrics(y[:, -1], y_hat[:, -1])
    report = MetricsReport(
        model=model.kind,
        seq_len=test.seq_len,
        horizon=test.horizon,
        mse=m["mse"],
        mae=m["mae"],
        mape=m["mape"],
        r2=m["r2"],
        n_test_samples=m["n"],
        mape_excluded=m["mape_excluded"],
    )
    if per_step:
        report.per_step = [dict(step=j + 1, **compute_metrics(y[:, j], y_hat[:, j])) for j in range(test.horizon)]
    return report
