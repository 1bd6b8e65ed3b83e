"""Series ingestion, normalization, missingness simulation and windowing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

SENTINEL = np.nan
DEFAULT_RESOLUTION = 300


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass
class TimeSeries:
    """Regularly sampled scalar series with a presence mask.

    ``start`` is epoch seconds (UTC) of the first sample. Entries where
    ``mask`` is False hold :data:`SENTINEL` and must never be read.
    """

    values: np.ndarray
    mask: np.ndarray
    start: int = 0
    resolution: int = DEFAULT_RESOLUTION
    # mask before any imputation, kept as provenance by the imputers
    source_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 1:
            raise DataError(f"values {self.values.shape} and mask {self.mask.shape} differ")
        if self.resolution <= 0:
            raise DataError("resolution must be positive")

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def from_values(cls, values, mask=None, start: int = 0,
                    resolution: int = DEFAULT_RESOLUTION) -> "TimeSeries":
        values = np.asarray(values, dtype=np.float64)
        if mask is None:
            mask = np.isfinite(values)
        mask = np.asarray(mask, dtype=bool)
        return cls(np.where(mask, values, SENTINEL), mask, start, resolution)

    def timestamps(self) -> np.ndarray:
        return self.start + self.resolution * np.arange(len(self), dtype=np.int64)

    def slice(self, a: int, b: int) -> "TimeSeries":
        src = None if self.source_mask is None else self.source_mask[a:b].copy()
        return TimeSeries(self.values[a:b].copy(), self.mask[a:b].copy(),
                          self.start + a * self.resolution, self.resolution, src)

    def with_sentinel(self, sentinel: float) -> "TimeSeries":
        return replace(self, values=np.where(self.mask, self.values, sentinel))

    @property
    def missing_rate(self) -> float:
        return 0.0 if len(self) == 0 else float(1.0 - self.mask.mean())


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2

    def __post_init__(self):
        if min(self.train, self.val, self.test) <= 0:
            raise ValueError("split fractions must be positive")
        if not math.isclose(self.train + self.val + self.test, 1.0, abs_tol=1e-9):
            raise ValueError("split fractions must sum to 1")

    def bounds(self, n: int) -> tuple[int, int]:
        """End indices (exclusive) of the training and validation segments."""
        n_train = int(n * self.train)
        n_val = int(n * self.val)
        return n_train, n_train + n_val

    def split(self, series: TimeSeries) -> tuple[TimeSeries, TimeSeries, TimeSeries]:
        a, b = self.bounds(len(series))
        return series.slice(0, a), series.slice(a, b), series.slice(b, len(series))


# ---------------------------------------------------------------------------
# CSV


def _parse_timestamp(text: str) -> int:
    text = text.strip()
    try:
        return int(round(float(text)))
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp()))


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def ingest_csv(path, timestamp_col: str = "timestamp", value_col: str = "power",
               resolution: Optional[int] = None, tolerance: float = 1.0) -> TimeSeries:
    """Read a ``timestamp,power`` CSV into a :class:`TimeSeries`.

    Empty, ``nan`` or non-finite values become missing. Row numbers in error
    messages are file line numbers (the header is line 1).
    """
    stamps: list[int] = []
    values: list[float] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or timestamp_col not in reader.fieldnames \
                or value_col not in reader.fieldnames:
            raise DataError(f"{path}: header must contain {timestamp_col!r} and {value_col!r}")
        for lineno, row in enumerate(reader, start=2):
            try:
                ts = _parse_timestamp(row[timestamp_col])
            except (ValueError, TypeError, AttributeError) as exc:
                raise DataError(f"{path}: row {lineno}: bad timestamp {row[timestamp_col]!r}") from exc
            raw = (row[value_col] or "").strip()
            if raw == "":
                val = math.nan
            else:
                try:
                    val = float(raw)
                except ValueError as exc:
                    raise DataError(f"{path}: row {lineno}: bad value {raw!r}") from exc
            if stamps:
                step = ts - stamps[-1]
                if step <= 0:
                    kind = "duplicate" if step == 0 else "non-monotone"
                    raise DataError(f"{path}: row {lineno}: {kind} timestamp {row[timestamp_col]!r}")
                if resolution is None:
                    resolution = step
                elif abs(step - resolution) > tolerance:
                    raise DataError(f"{path}: row {lineno}: spacing {step}s differs from "
                                    f"resolution {resolution}s")
            stamps.append(ts)
            values.append(val)
    vals = np.array(values, dtype=np.float64)
    return TimeSeries.from_values(vals, np.isfinite(vals), stamps[0] if stamps else 0,
                                  resolution or DEFAULT_RESOLUTION)


def write_csv(path, series: TimeSeries, value_col: str = "power", fmt: str = ".6f") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", value_col])
        for ts, v, m in zip(series.timestamps(), series.values, series.mask):
            w.writerow([format_timestamp(ts), format(v, fmt) if m else ""])


# ---------------------------------------------------------------------------
# normalization and missingness


@dataclass(frozen=True)
class MinMax:
    lo: float
    hi: float

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def inverse(self, y):
        return np.asarray(y, dtype=np.float64) * (self.hi - self.lo) + self.lo

    def to_dict(self) -> dict:
        return {"min": self.lo, "max": self.hi}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMax":
        return cls(float(d["min"]), float(d["max"]))


def minmax_fit_apply(series: TimeSeries, split: SplitSpec) -> tuple[TimeSeries, MinMax]:
    """Fit min-max constants on observed training values and scale everything.

    Values outside the training range map outside [0, 1]; that is expected for
    later segments.
    """
    n_train, _ = split.bounds(len(series))
    train = series.values[:n_train][series.mask[:n_train]]
    if np.unique(train).size < 2:
        raise DataError("training split needs at least two distinct observed values")
    scaler = MinMax(float(train.min()), float(train.max()))
    scaled = np.where(series.mask, scaler.apply(np.where(series.mask, series.values, 0.0)), SENTINEL)
    return replace(series, values=scaled), scaler


def apply_mcar(series: TimeSeries, rate: float, seed: int) -> TimeSeries:
    """Drop each observed entry independently with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"missing rate must be in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    drop = rng.random(len(series)) < rate
    mask = series.mask & ~drop
    return replace(series, values=np.where(mask, series.values, SENTINEL), mask=mask)


def linear_fill(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Straight-line interpolation over gaps, nearest-observed hold at the ends."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("cannot interpolate a series with no observed values")
    idx = np.arange(mask.size)
    obs = idx[mask]
    out = np.interp(idx, obs, np.asarray(values, dtype=np.float64)[mask])
    out[mask] = np.asarray(values)[mask]
    return out


# ---------------------------------------------------------------------------
# sequence instances


@dataclass
class SequenceInstance:
    """``T`` successive lag windows starting at ``start``.

    ``values``/``mask`` cover ``lag + T`` raw positions. Window ``i`` spans
    positions ``i .. i+lag-1`` and its target is position ``i+lag``.
    ``first_window`` is the fully imputed first window.
    """

    start: int
    lag: int
    T: int
    values: np.ndarray
    mask: np.ndarray
    first_window: np.ndarray
    bootstrapped: bool = False

    @property
    def targets(self) -> np.ndarray:
        return self.values[self.lag:]

    @property
    def target_mask(self) -> np.ndarray:
        return self.mask[self.lag:]

    def raw_window(self, i: int) -> np.ndarray:
        return self.values[i:i + self.lag]

    def window_mask(self, i: int) -> np.ndarray:
        return self.mask[i:i + self.lag]


def bootstrap_window(series: TimeSeries, a: int, b: int,
                     prev_obs: Optional[np.ndarray] = None) -> np.ndarray:
    """Causally fill positions a..b-1 using the last observation before ``a``."""
    if prev_obs is None:
        obs_idx = np.where(series.mask[:a + 1], np.arange(a + 1), -1)
        prev_obs = np.concatenate([[-1], np.maximum.accumulate(obs_idx)[:-1]])
    lo = prev_obs[a]
    lo = a if lo < 0 else lo
    seg_mask = series.mask[lo:b]
    if seg_mask.any():
        return linear_fill(series.values[lo:b], seg_mask)[a - lo:]
    # nothing observed up to b: fall back to the first observation anywhere
    first = np.flatnonzero(series.mask)
    if first.size == 0:
        raise DataError("series has no observed values")
    return np.full(b - a, series.values[first[0]])


def make_instances(series: TimeSeries, lag: int, T: int, stride: Optional[int] = None,
                   ) -> list[SequenceInstance]:
    """Cut ``series`` into sequence instances of ``T`` windows of length ``lag``.

    ``stride`` defaults to ``T`` (non-overlapping). First windows with gaps
    are bootstrap-filled by linear interpolation from past data only.
    """
    stride = T if stride is None else stride
    if lag < 1 or T < 1 or stride < 1:
        raise ValueError("lag, T and stride must be positive")
    span = lag + T
    n = len(series)
    if n < span:
        raise DataError(f"series of length {n} is shorter than lag + T = {span}")
    obs_idx = np.where(series.mask, np.arange(n), -1)
    # prev_obs[i]: last observed index strictly before i (or -1)
    prev_obs = np.concatenate([[-1], np.maximum.accumulate(obs_idx)[:-1]])
    out = []
    for s in range(0, n - span + 1, stride):
        vals = series.values[s:s + span].copy()
        msk = series.mask[s:s + span].copy()
        if msk[:lag].all():
            first = vals[:lag].copy()
            boot = False
        else:
            first = bootstrap_window(series, s, s + lag, prev_obs)
            boot = True
        out.append(SequenceInstance(s, lag, T, vals, msk, first, boot))
    return out


@dataclass
class InstanceBatch:
    """Arrays stacked from instances: ``first (N, lag)``, ``targets/tmask (N, T)``."""

    first: np.ndarray
    targets: np.ndarray
    tmask: np.ndarray
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.first.shape[0]

    def take(self, idx) -> "InstanceBatch":
        return InstanceBatch(self.first[idx], self.targets[idx], self.tmask[idx], self.starts[idx])


def stack_instances(instances: list[SequenceInstance]) -> InstanceBatch:
    first = np.stack([inst.first_window for inst in instances])
    tmask = np.stack([inst.target_mask for inst in instances])
    targets = np.where(tmask, np.stack([inst.targets for inst in instances]), 0.0)
    starts = np.array([inst.start for inst in instances], dtype=np.int64)
    return InstanceBatch(first, targets, tmask, starts)


def lag_steps(lag_minutes: float, resolution: int) -> int:
    """Convert a lag given in minutes to a whole number of samples."""
    steps = lag_minutes * 60.0 / resolution
    if steps < 1 or abs(steps - round(steps)) > 1e-9:
        raise ValueError(f"lag of {lag_minutes} min is not a positive multiple of {resolution}s")
    return int(round(steps))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SimulationSpec:
    """Seasonal + AR(1) + bounded-noise generator clamped to [0, capacity]."""

    n: int = 50_000
    capacity: float = 52.5
    period: int = 288
    season_amp: float = 0.2
    level: float = 0.45
    ar_coef: float = 0.98
    ar_scale: float = 0.03
    noise: float = 0.04
    resolution: int = DEFAULT_RESOLUTION
    start: int = 1514764800  # 2018-01-01T00:00:00Z

    def validate(self) -> None:
        if self.n < 0:
            raise ValueError("length must be non-negative")
        if self.capacity <= 0 or self.period <= 0 or self.resolution <= 0:
            raise ValueError("capacity, period and resolution must be positive")
        if not 0 <= self.ar_coef < 1:
            raise ValueError("ar_coef must be in [0, 1)")
        if self.noise < 0 or self.ar_scale < 0:
            raise ValueError("noise scales must be non-negative")


def simulate(spec: SimulationSpec, seed: int) -> TimeSeries:
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.n
    eps = rng.normal(0.0, spec.ar_scale, n)
    z = np.empty(n)
    prev = rng.normal(0.0, spec.ar_scale / math.sqrt(1 - spec.ar_coef ** 2)) if n else 0.0
    for t in range(n):
        prev = spec.ar_coef * prev + eps[t]
        z[t] = prev
    phase = rng.uniform(0, 2 * math.pi)
    t = np.arange(n)
    season = spec.season_amp * np.sin(2 * math.pi * t / spec.period + phase)
    u = spec.level + season + z + rng.uniform(-spec.noise, spec.noise, n)
    power = spec.capacity * np.clip(u, 0.0, 1.0)
    return TimeSeries.from_values(power, np.ones(n, dtype=bool), spec.start, spec.resolution)
