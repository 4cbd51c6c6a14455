"""Imputation, moving-average features, horizon labels and lookback windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.signal import lfilter

from .dataset import Cohort, SurgeryRecord, cohort_stats

STD_FLOOR = 1e-8
UNDEFINED = -1  # label sentinel: minute excluded from every sample set


@dataclass(frozen=True)
class NormalizationStats:
    mean: Mapping[str, float]
    std: Mapping[str, float]

    @classmethod
    def fit(cls, train: Cohort) -> NormalizationStats:
        """Means and floored population stds from the training cohort only."""
        summary = cohort_stats(train)
        bad = [n for n, s in summary.items() if s.degenerate]
        if bad:
            raise ValueError(f"channels without any training observation: {bad}")
        return cls(
            mean={n: s.mean for n, s in summary.items()},
            std={n: max(s.std, STD_FLOOR) for n, s in summary.items()},
        )

    @classmethod
    def identity(cls, names: Iterable[str]) -> NormalizationStats:
        names = list(names)
        return cls(mean=dict.fromkeys(names, 0.0), std=dict.fromkeys(names, 1.0))


@dataclass(frozen=True)
class EmaConfig:
    alphas_ema: tuple[float, ...] = (5.0, 1.0, 0.1)
    alpha_emv: float = 5.0
    dt_min: float = 1.0

    def __post_init__(self) -> None:
        if any(a <= 0 for a in (*self.alphas_ema, self.alpha_emv)):
            raise ValueError("EMA/EMV rates must be positive")
        if self.dt_min <= 0:
            raise ValueError("dt_min must be positive")


@dataclass(frozen=True)
class LabelConfig:
    threshold: float = 92.0
    horizon_min: int = 5
    require_currently_normal: bool = True

    def __post_init__(self) -> None:
        if not 0 < self.threshold <= 100:
            raise ValueError("threshold must lie in (0, 100]")
        if self.horizon_min < 1:
            raise ValueError("horizon_min must be >= 1")


@dataclass
class FeatureMatrix:
    columns: list[str]
    X: np.ndarray
    y: np.ndarray
    surgery_ids: np.ndarray
    times: np.ndarray

    def __post_init__(self) -> None:
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.X.shape[1] != len(self.columns):
            raise ValueError("X shape does not match column names")
        if not (self.y.shape == self.surgery_ids.shape == self.times.shape == (n,)):
            raise ValueError("labels/provenance must have one entry per row")
        if n and not np.isin(self.y, (0, 1)).all():
            raise ValueError("labels must be 0/1")

    def __len__(self) -> int:
        return self.X.shape[0]

    def select(self, columns: Sequence[str]) -> FeatureMatrix:
        idx = [self.columns.index(c) for c in columns]
        return FeatureMatrix(list(columns), self.X[:, idx], self.y, self.surgery_ids, self.times)

    def hstack(self, columns: Sequence[str], values: np.ndarray) -> FeatureMatrix:
        values = np.asarray(values, dtype=np.float64).reshape(len(self), -1)
        if values.shape[1] != len(columns):
            raise ValueError("column names do not match appended values")
        return FeatureMatrix(
            [*self.columns, *columns],
            np.hstack([self.X, values]),
            self.y,
            self.surgery_ids,
            self.times,
        )

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["surgery_id", "time_min", *self.columns, "label"])
            for i in range(len(self)):
                w.writerow([self.surgery_ids[i], int(self.times[i]),
                            *map(repr, self.X[i].tolist()), int(self.y[i])])

    @classmethod
    def load_csv(cls, path: str | Path) -> FeatureMatrix:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
        if header[:2] != ["surgery_id", "time_min"] or header[-1] != "label":
            raise ValueError(f"{path}: not a feature matrix file")
        X = np.array([[float(v) for v in r[2:-1]] for r in rows]).reshape(len(rows), len(header) - 3)
        return cls(
            header[2:-1],
            X,
            np.array([int(r[-1]) for r in rows], dtype=np.int8),
            np.array([r[0] for r in rows], dtype=object),
            np.array([int(r[1]) for r in rows], dtype=np.int64),
        )


@dataclass
class WindowTensor:
    """Windows of shape (sample, lag, channel); lag 0 is the oldest minute."""

    X: np.ndarray
    lookback: int
    channels: list[str]
    y: np.ndarray
    surgery_ids: np.ndarray
    times: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.X.ndim != 3 or self.X.shape[1] != self.lookback:
            raise ValueError("window tensor must be (n, lookback, channels)")

    def __len__(self) -> int:
        return self.X.shape[0]


# --------------------------------------------------------------------- imputation


def impute_and_standardize(
    cohort: Cohort, stats: NormalizationStats, standardize: bool = True
) -> Cohort:
    """Fill missing values with the training mean, then z-score every channel.

    With ``standardize=False`` only the imputation is applied, which is
    what the moving-average features are computed from.
    """
    absent = [n for n in cohort.schema.names if n not in stats.mean]
    if absent:
        raise KeyError(f"no normalization stats for channels {absent}")

    def scale(name: str, x):
        if not standardize:
            return x
        return (x - stats.mean[name]) / max(stats.std[name], STD_FLOOR)

    out = []
    for s in cohort.surgeries:
        series = {
            name: scale(name, np.where(s.observed[name], s.series[name], stats.mean[name]))
            for name in s.series
        }
        statics = {
            name: scale(name, stats.mean[name] if v is None else v) for name, v in s.statics.items()
        }
        out.append(SurgeryRecord.from_arrays(s.surgery_id, series, statics))
    return Cohort(cohort.schema, tuple(out))


# --------------------------------------------------------------------- EMA / EMV


def smoothing_coefficient(alpha: float, dt: float = 1.0) -> float:
    """Per-step weight of the newest sample for a rate ``alpha`` per minute."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return -math.expm1(-alpha * dt)


def ema(series: Sequence[float], alpha: float, dt: float = 1.0) -> np.ndarray:
    """Exponential moving average ``y[t] = (1-b) y[t-1] + b x[t]`` with ``y[0] = x[0]``."""
    beta = smoothing_coefficient(alpha, dt)
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("series is empty")
    # filtering deviations from x[0] keeps constants an exact fixed point
    return x[0] + lfilter([beta], [1.0, beta - 1.0], x - x[0])


def emv(series: Sequence[float], alpha: float, dt: float = 1.0) -> np.ndarray:
    """Incremental exponentially weighted variance around the running EMA.

    ``v[t] = (1-b) (v[t-1] + b d[t]^2)`` with ``d[t] = x[t] - ema[t-1]`` and
    ``v[0] = 0``; nonnegative by construction.
    """
    beta = smoothing_coefficient(alpha, dt)
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("series is empty")
    y = ema(x, alpha, dt)
    u = np.zeros_like(x)
    u[1:] = (1.0 - beta) * beta * (x[1:] - y[:-1]) ** 2
    return lfilter([1.0], [1.0, beta - 1.0], u)


def _alpha_tag(alpha: float) -> str:
    return repr(float(alpha))


def processed_column_names(channel: str, cfg: EmaConfig) -> list[str]:
    return [
        f"{channel}__raw",
        *(f"{channel}__ema_{_alpha_tag(a)}" for a in cfg.alphas_ema),
        f"{channel}__emv_{_alpha_tag(cfg.alpha_emv)}",
    ]


# --------------------------------------------------------------------- labels


def label_hypoxemia(
    sao2: Sequence[float], observed: Sequence[bool] | None = None, cfg: LabelConfig = LabelConfig()
) -> np.ndarray:
    """Per-minute onset labels: 1, 0 or ``UNDEFINED``.

    Minute ``t`` is positive when an observed value in ``(t, t+horizon]``
    falls below the threshold, negative when that window holds at least one
    observation and none is low. It is undefined when the window runs past
    the end of the surgery, holds no observation, or (with
    ``require_currently_normal``) the value at ``t`` is already low.
    """
    x = np.asarray(sao2, dtype=np.float64)
    obs = ~np.isnan(x) if observed is None else np.asarray(observed, dtype=bool)
    n, hz = x.size, cfg.horizon_min
    low = obs & (np.where(obs, x, np.inf) < cfg.threshold)
    labels = np.full(n, UNDEFINED, dtype=np.int8)
    if n <= hz:
        return labels
    # window sums over (t, t+hz] for t = 0..n-hz-1 via cumulative counts
    c_low = np.concatenate([[0], np.cumsum(low)])
    c_obs = np.concatenate([[0], np.cumsum(obs)])
    t = np.arange(n - hz)
    n_low = c_low[t + hz + 1] - c_low[t + 1]
    n_obs = c_obs[t + hz + 1] - c_obs[t + 1]
    lab = np.where(n_low > 0, 1, np.where(n_obs > 0, 0, UNDEFINED)).astype(np.int8)
    if cfg.require_currently_normal:
        lab[low[t]] = UNDEFINED
    labels[: n - hz] = lab
    return labels


def label_cohort(cohort: Cohort, cfg: LabelConfig = LabelConfig()) -> dict[str, np.ndarray]:
    """Labels for every surgery, computed on the raw target signal."""
    target = cohort.schema.target
    return {
        s.surgery_id: label_hypoxemia(s.series[target], s.observed[target], cfg)
        for s in cohort.surgeries
    }


# --------------------------------------------------------------------- feature builders


def _sample_minutes(labels: np.ndarray, min_time: int) -> np.ndarray:
    t = np.flatnonzero(labels != UNDEFINED)
    return t[t >= min_time]


def build_processed_features(
    cohort: Cohort,
    labels: Mapping[str, np.ndarray],
    ema_cfg: EmaConfig = EmaConfig(),
    include_channels: Iterable[str] | None = None,
    include_statics: bool = True,
    min_time: int = 0,
) -> FeatureMatrix:
    """Raw value, EMAs and EMV per time-series channel, plus statics.

    One row per (surgery, minute) with a defined label and ``time >=
    min_time``. Moving averages always run over the full history up to the
    row's minute.
    """
    schema = cohort.schema
    channels = list(schema.time_series if include_channels is None else include_channels)
    unknown = [c for c in channels if c not in schema.time_series]
    if unknown:
        raise KeyError(f"unknown time-series channels {unknown}")
    # keep schema order regardless of how the include set was given
    channels = [c for c in schema.time_series if c in set(channels)]
    statics = list(schema.statics) if include_statics else []
    columns = [name for c in channels for name in processed_column_names(c, ema_cfg)] + statics

    blocks, ys, sids, times = [], [], [], []
    for s in cohort.surgeries:
        if not s.is_complete:
            raise ValueError(f"surgery {s.surgery_id} has missing values; impute first")
        t = _sample_minutes(labels[s.surgery_id], min_time)
        if t.size == 0:
            continue
        cols = []
        for c in channels:
            x = s.series[c]
            cols.append(x[t])
            cols.extend(ema(x, a, ema_cfg.dt_min)[t] for a in ema_cfg.alphas_ema)
            cols.append(emv(x, ema_cfg.alpha_emv, ema_cfg.dt_min)[t])
        cols.extend(np.full(t.size, s.statics[name], dtype=np.float64) for name in statics)
        blocks.append(np.column_stack(cols) if cols else np.empty((t.size, 0)))
        ys.append(labels[s.surgery_id][t])
        sids.append(np.full(t.size, s.surgery_id, dtype=object))
        times.append(t)
    if not blocks:
        return FeatureMatrix(columns, np.empty((0, len(columns))), np.empty(0, np.int8),
                             np.empty(0, object), np.empty(0, np.int64))
    return FeatureMatrix(
        columns,
        np.vstack(blocks),
        np.concatenate(ys).astype(np.int8),
        np.concatenate(sids),
        np.concatenate(times).astype(np.int64),
    )


def window_samples(
    cohort: Cohort,
    channels: Sequence[str],
    lookback: int,
    labels: Mapping[str, np.ndarray],
    min_time: int | None = None,
) -> WindowTensor:
    """Lookback windows ending at every labeled minute ``t >= lookback - 1``.

    ``min_time`` may raise the start further so that windows of different
    lookbacks cover identical samples.
    """
    if lookback < 1:
        raise ValueError("lookback must be >= 1")
    start = lookback - 1 if min_time is None else max(lookback - 1, min_time)
    channels = list(channels)
    blocks, ys, sids, times = [], [], [], []
    for s in cohort.surgeries:
        t = _sample_minutes(labels[s.surgery_id], start)
        if t.size == 0:
            continue
        series = np.column_stack([s.series[c] for c in channels])
        if np.isnan(series).any():
            raise ValueError(f"surgery {s.surgery_id} has missing values; impute first")
        view = np.lib.stride_tricks.sliding_window_view(series, lookback, axis=0)
        # view[k] covers minutes k..k+lookback-1 with shape (channels, lookback)
        blocks.append(view[t - lookback + 1].transpose(0, 2, 1))
        ys.append(labels[s.surgery_id][t])
        sids.append(np.full(t.size, s.surgery_id, dtype=object))
        times.append(t)
    if not blocks:
        return WindowTensor(np.empty((0, lookback, len(channels))), lookback, channels,
                            np.empty(0, np.int8), np.empty(0, object), np.empty(0, np.int64))
    return WindowTensor(
        np.ascontiguousarray(np.concatenate(blocks)),
        lookback,
        channels,
        np.concatenate(ys).astype(np.int8),
        np.concatenate(sids),
        np.concatenate(times).astype(np.int64),
    )
