"""Hourly power series: CSV I/O, min-max scaling, chronological split, windowing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DataError

HEADER = ["timestamp", "power"]
HOUR = np.timedelta64(3600, "s")
PROFILES = ("sine", "diurnal-noise")


@dataclass
class TimeSeries:
    timestamps: np.ndarray  # datetime64[s], strictly increasing
    values: np.ndarray  # float64 watts

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape or self.values.ndim != 1:
            raise DataError("timestamps and values must be 1-D arrays of equal length")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def gaps(self) -> int:
        """Number of steps that are not exactly one hour apart."""
        return int(np.count_nonzero(np.diff(self.timestamps) != HOUR))

    def slice(self, start: int, stop: int) -> "TimeSeries":
        return TimeSeries(self.timestamps[start:stop], self.values[start:stop])


def load_csv(path) -> TimeSeries:
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    stamps, values = [], []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if [h.strip() for h in header] != HEADER:
            raise DataError(f"{path}:1: expected header 'timestamp,power', got {','.join(header)!r}")
        prev = None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{line}: expected 2 fields, got {len(row)}")
            try:
                ts = np.datetime64(datetime.fromisoformat(row[0].strip()).replace(tzinfo=None), "s")
                val = float(row[1])
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
            if not np.isfinite(val):
                raise DataError(f"{path}:{line}: non-finite power value")
            if prev is not None and ts <= prev:
                what = "duplicated" if ts == prev else "non-increasing"
                raise DataError(f"{path}:{line}: {what} timestamp {row[0].strip()}")
            prev = ts
            stamps.append(ts)
            values.append(val)
    if not values:
        raise DataError(f"{path}: no data rows")
    return TimeSeries(np.array(stamps, dtype="datetime64[s]"), np.array(values))


def write_csv(ts: TimeSeries, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for t, v in zip(ts.timestamps, ts.values):
            w.writerow([str(t), repr(float(v))])
    return path


@dataclass(frozen=True)
class Scaler:
    """Affine map of [min, max] onto [-1, 1]."""

    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise DataError(f"min-max scaling undefined for constant data (min=max={self.min})")

    def transform(self, x):
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.min) / (self.max - self.min) - 1.0

    def inverse_transform(self, x):
        return (np.asarray(x, dtype=np.float64) + 1.0) * (self.max - self.min) / 2.0 + self.min


def fit_minmax(train) -> Scaler:
    values = train.values if isinstance(train, TimeSeries) else np.asarray(train, dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot fit a scaler on empty data")
    return Scaler(float(values.min()), float(values.max()))


def normalize(scaler: Scaler, x):
    return scaler.transform(x)


def denormalize(scaler: Scaler, x):
    return scaler.inverse_transform(x)


def split_train_test(ts: TimeSeries, train_frac: float = 0.70, min_len: int = 1) -> tuple[TimeSeries, TimeSeries]:
    """Chronological split; train gets the first floor(frac * T) points."""
    if not 0.0 < train_frac < 1.0:
        raise DataError(f"train fraction must lie in (0, 1), got {train_frac}")
    # decimal reading of the fraction: floor(0.7 * 90) must be 63, not 62
    n_train = math.floor(Fraction(repr(float(train_frac))) * len(ts))
    train, test = ts.slice(0, n_train), ts.slice(n_train, len(ts))
    if len(train) < min_len or len(test) < min_len:
        raise DataError(
            f"split of {len(ts)} points gives {len(train)}/{len(test)}; each side needs >= {min_len}"
        )
    return train, test


@dataclass
class WindowedDataset:
    x: np.ndarray  # [N, L, 1]
    y: np.ndarray  # [N, m, 1]
    origins: np.ndarray  # index (in the full series) of each window's first point
    seq_len: int
    horizon: int
    stride: int = 1

    def __len__(self) -> int:
        return len(self.x)

    def target_indices(self) -> np.ndarray:
        """Series index of every target value, shape [N, m]."""
        return self.origins[:, None] + self.seq_len + np.arange(self.horizon)[None, :]


def window_count(n: int, seq_len: int, horizon: int, stride: int = 1) -> int:
    if n < seq_len + horizon:
        return 0
    return (n - seq_len - horizon) // stride + 1


def make_windows(values, seq_len: int, horizon: int, stride: int = 1, offset: int = 0) -> WindowedDataset:
    """Rolling windows: x = v[k:k+L], y = v[k+L:k+L+m] for k = 0, stride, ...

    ``offset`` is added to the recorded origins so that windows cut from a
    test split keep their position in the full series.
    """
    values = np.asarray(values.values if isinstance(values, TimeSeries) else values, dtype=np.float64)
    if seq_len < 1 or horizon < 1 or stride < 1:
        raise DataError("seq_len, horizon and stride must all be >= 1")
    n = window_count(len(values), seq_len, horizon, stride)
    if n == 0:
        raise DataError(f"series of length {len(values)} is shorter than L+m = {seq_len + horizon}")
    span = np.lib.stride_tricks.sliding_window_view(values, seq_len + horizon)[::stride][:n]
    return WindowedDataset(
        x=span[:, :seq_len, None].copy(),
        y=span[:, seq_len:, None].copy(),
        origins=np.arange(n) * stride + offset,
        seq_len=seq_len,
        horizon=horizon,
        stride=stride,
    )


def synthesize_series(
    n: int,
    seed: int = 0,
    profile: str = "diurnal-noise",
    start: str = "2020-01-01T00:00:00",
) -> TimeSeries:
    """Deterministic hourly stand-in series.

    ``sine``: 1 + sin(2*pi*t/24), in [0, 2].
    ``diurnal-noise``: daily cycle + slow regime drift + bounded noise,
    clipped at zero.
    """
    if n < 1:
        raise DataError(f"series length must be >= 1, got {n}")
    if profile not in PROFILES:
        raise DataError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=np.float64)
    stamps = np.datetime64(start, "s") + np.arange(n) * HOUR
    if profile == "sine":
        return TimeSeries(stamps, 1.0 + np.sin(2.0 * np.pi * t / 24.0))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    daily = 0.6 * np.sin(2.0 * np.pi * t / 24.0 + phase)
    # slow drift: a few long-period components with random phases
    periods = np.array([24.0 * 7, 24.0 * 17, 24.0 * 41])
    amps = np.array([0.35, 0.25, 0.15])
    drift_phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
    drift = (amps[:, None] * np.sin(2.0 * np.pi * t[None, :] / periods[:, None] + drift_phase[:, None])).sum(0)
    noise = rng.uniform(-0.1, 0.1, size=n)
    values = np.clip(1.2 + daily + drift + noise, 0.0, None)
    return TimeSeries(stamps, values)


@dataclass
class PreparedData:
    scaler: Scaler
    train: WindowedDataset
    test: WindowedDataset
    train_len: int
    test_series: TimeSeries


def prepare(ts: TimeSeries, seq_len: int, horizon: int, train_frac: float = 0.70, stride: int = 1) -> PreparedData:
    """Split, fit the scaler on train only, and window each side separately."""
    train, test = split_train_test(ts, train_frac, min_len=seq_len + horizon)
    scaler = fit_minmax(train)
    return PreparedData(
        scaler=scaler,
        train=make_windows(scaler.transform(train.values), seq_len, horizon, stride),
        test=make_windows(scaler.transform(test.values), seq_len, horizon, stride, offset=len(train)),
        train_len=len(train),
        test_series=test,
    )
