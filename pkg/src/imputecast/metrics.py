"""Verification of quantile forecasts: reliability, sharpness and skill score.

All metrics take a fan matrix of shape ``(N, I)`` (one row per forecast,
one column per nominal level) plus the observations. The unit step uses
``H(0) = 1``: an observation equal to a quantile counts as below it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .model import ForecasterParams, QuantileFan, fan_values, monotonize
from .pipeline import TimeSeries, bootstrap_window, format_timestamp
from .train import DEFAULT_LEVELS

FanInput = Union[np.ndarray, Sequence[QuantileFan]]


class MetricError(ValueError):
    pass


def _key(a: float) -> float:
    return round(float(a), 10)


def fan_matrix(fans: FanInput, required: Sequence[float],
               fan_levels: Optional[Sequence[float]] = None) -> np.ndarray:
    """Columns of ``fans`` for the ``required`` levels, shape ``(N, len(required))``."""
    if isinstance(fans, np.ndarray):
        mat = np.atleast_2d(np.asarray(fans, dtype=np.float64))
        fan_levels = list(required) if fan_levels is None else list(fan_levels)
        if mat.shape[1] != len(fan_levels):
            raise MetricError(f"fan matrix has {mat.shape[1]} columns for {len(fan_levels)} levels")
    else:
        fans = list(fans)
        if not fans:
            raise MetricError("no fans given")
        fan_levels = list(fans[0].levels)
        if any(list(f.levels) != fan_levels for f in fans):
            raise MetricError("fans carry different level sets")
        mat = np.stack([f.values for f in fans])
    pos = {_key(a): j for j, a in enumerate(fan_levels)}
    missing = [a for a in required if _key(a) not in pos]
    if missing:
        raise MetricError(f"fans lack required levels {missing}")
    return mat[:, [pos[_key(a)] for a in required]]


def _prepare(fans, observations, levels, fan_levels):
    q = fan_matrix(fans, levels, fan_levels)
    x = np.asarray(observations, dtype=np.float64).ravel()
    if x.size == 0 or q.shape[0] != x.size:
        raise MetricError(f"{q.shape[0]} fans for {x.size} observations")
    return q, x, np.asarray(levels, dtype=np.float64)


def observed_frequencies(fans: FanInput, observations, levels: Sequence[float] = DEFAULT_LEVELS,
                         fan_levels=None) -> np.ndarray:
    """Fraction of observations at or below each forecast quantile."""
    q, x, _ = _prepare(fans, observations, levels, fan_levels)
    return (q >= x[:, None]).mean(axis=0)


def reliability(fans: FanInput, observations, levels: Sequence[float] = DEFAULT_LEVELS,
                fan_levels=None):
    """Per-level ``|alpha - observed frequency|`` and their mean in percent."""
    freq = observed_frequencies(fans, observations, levels, fan_levels)
    dev = np.abs(np.asarray(levels, dtype=np.float64) - freq)
    return dev, 100.0 * float(dev.mean())


def central_pairs(levels: Sequence[float]) -> list[tuple[float, float]]:
    """Symmetric ``(alpha, 1 - alpha)`` pairs with ``alpha < 0.5``."""
    return [(a, round(1.0 - a, 10)) for a in levels if a < 0.5]


def sharpness(fans: FanInput, levels: Sequence[float] = DEFAULT_LEVELS, fan_levels=None):
    """Mean width of the central prediction intervals.

    Returns ``(widths, mean_width)`` with one width per pair from
    :func:`central_pairs`, ordered from the widest interval.
    """
    pairs = central_pairs(levels)
    if not pairs:
        raise MetricError("no central interval can be formed from the levels")
    if isinstance(fans, np.ndarray) and fan_levels is None:
        fan_levels = list(levels)
    if isinstance(fans, np.ndarray):
        have = {_key(a) for a in fan_levels}
    else:
        have = {_key(a) for a in list(fans)[0].levels}
    absent = sorted({hi for _, hi in pairs if _key(hi) not in have})
    if absent:
        raise MetricError(f"fans lack upper interval levels {absent}")
    lo = fan_matrix(fans, [p[0] for p in pairs], fan_levels)
    hi = fan_matrix(fans, [p[1] for p in pairs], fan_levels)
    widths = (hi - lo).mean(axis=0)
    return widths, float(widths.mean())


def skill(fans: FanInput, observations, levels: Sequence[float] = DEFAULT_LEVELS,
          fan_levels=None) -> float:
    """Mean over samples of ``sum_i [H(q_i - x) - alpha_i] (x - q_i)``; never positive."""
    q, x, a = _prepare(fans, observations, levels, fan_levels)
    ind = (q >= x[:, None]).astype(np.float64)
    return float(((ind - a) * (x[:, None] - q)).sum(axis=1).mean())


@dataclass
class EvaluationReport:
    levels: list
    frequencies: list
    deviations: list
    reliability: float
    pi_coverages: list
    pi_widths: list
    sharpness: float
    skill: float
    n: int
    n_origins: int
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def write_csv(self, path) -> None:
        """One row per nominal level; interval columns filled for levels below 0.5."""
        width_of = {_key(a): w for (a, _), w in zip(central_pairs(self.levels), self.pi_widths)}
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "observed_frequency", "deviation", "pi_coverage", "pi_width"])
            for a, f, d in zip(self.levels, self.frequencies, self.deviations):
                inner = _key(a) in width_of
                w.writerow([repr(a), repr(f), repr(d),
                            repr(round(1.0 - 2 * a, 10)) if inner else "",
                            repr(width_of[_key(a)]) if inner else ""])


def build_report(fans: np.ndarray, observations, levels: Sequence[float] = DEFAULT_LEVELS,
                 n_origins: Optional[int] = None, meta: Optional[dict] = None) -> EvaluationReport:
    levels = [float(a) for a in levels]
    freq = observed_frequencies(fans, observations, levels)
    dev, rel = reliability(fans, observations, levels)
    widths, sharp = sharpness(fans, levels)
    sk = skill(fans, observations, levels)
    n = int(np.asarray(observations).size)
    return EvaluationReport(
        levels=levels, frequencies=freq.tolist(), deviations=dev.tolist(), reliability=rel,
        pi_coverages=[round(1.0 - 2 * a, 10) for a, _ in central_pairs(levels)],
        pi_widths=widths.tolist(), sharpness=sharp, skill=sk, n=n,
        n_origins=n if n_origins is None else int(n_origins), meta=dict(meta or {}))


# ---------------------------------------------------------------------------
# rolling one-step forecasts over a series


@dataclass
class SeriesForecast:
    """One-step fans for every origin of a series.

    Row ``j`` forecasts position ``targets[j]`` from the window ending just
    before it. ``fans`` are monotonized; ``inputs`` are the model inputs after
    median imputation.
    """

    targets: np.ndarray
    fans: np.ndarray
    observed: np.ndarray
    observations: np.ndarray
    inputs: np.ndarray


FanFn = Callable[[np.ndarray], np.ndarray]


def _fan_fn(model, levels) -> FanFn:
    if callable(model):
        return model
    return lambda windows: fan_values(model, windows, levels, sort=False)


def rolling_forecast(model: Union[ForecasterParams, FanFn], series: TimeSeries,
                     levels: Sequence[float], lag: int, chunk: int = 4096) -> SeriesForecast:
    """Roll the forecaster across ``series`` with median imputation of gaps.

    ``model`` is either parameters or a callable mapping ``(B, lag)`` windows
    to raw ``(B, len(levels))`` quantiles. Missing values after the first
    window are replaced by the previous window's median forecast; gaps in the
    first window are bootstrap-filled from the series itself.
    """
    levels = [float(a) for a in levels]
    mid = levels.index(0.5)
    fn = _fan_fn(model, levels)
    n = len(series)
    n_orig = n - lag
    if n_orig < 1:
        raise MetricError(f"series of length {n} too short for lag {lag}")
    filled = np.where(series.mask, series.values, np.nan)
    filled[:lag] = bootstrap_window(series, 0, lag)
    raw = np.empty((n_orig, len(levels)))
    missing_targets = np.flatnonzero(~series.mask[lag:])
    cursor = 0
    for stop in list(missing_targets) + [n_orig - 1]:
        # origins cursor..stop only read positions that are already known
        for a in range(cursor, stop + 1, chunk):
            b = min(a + chunk, stop + 1)
            wins = np.lib.stride_tricks.sliding_window_view(filled[a:b + lag - 1], lag)
            raw[a:b] = fn(np.ascontiguousarray(wins))
        if not series.mask[stop + lag]:
            filled[stop + lag] = raw[stop, mid]
        cursor = stop + 1
        if cursor >= n_orig:
            break
    obs = series.mask[lag:]
    return SeriesForecast(np.arange(lag, n), monotonize(raw), obs.copy(),
                          np.where(obs, series.values[lag:], np.nan), filled)


def evaluate_model(model: Union[ForecasterParams, FanFn], series: TimeSeries,
                   levels: Sequence[float] = DEFAULT_LEVELS, lag: Optional[int] = None,
                   meta: Optional[dict] = None):
    """Evaluate one-step quantile forecasts over ``series``.

    Only origins whose target is observed enter the metrics. Returns
    ``(EvaluationReport, SeriesForecast)``.
    """
    if lag is None:
        if callable(model):
            raise MetricError("lag is required with a callable forecaster")
        lag = model.arch.lag
    fc = rolling_forecast(model, series, levels, lag)
    if not fc.observed.any():
        raise MetricError("no observed targets to evaluate")
    report = build_report(fc.fans[fc.observed], fc.observations[fc.observed], levels,
                          n_origins=fc.targets.size, meta=meta)
    return report, fc


def write_forecast_csv(path, fc: SeriesForecast, series: TimeSeries, levels: Sequence[float],
                       scaler=None) -> None:
    """Long-format table: timestamp, observation, mask, one column per level.

    With ``scaler`` the values are mapped back to original units.
    """
    fans, obs = fc.fans, fc.observations
    if scaler is not None:
        fans, obs = scaler.inverse(fans), scaler.inverse(obs)
    stamps = series.timestamps()[fc.targets]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "observation", "mask"] + [f"q{a:.2f}" for a in levels])
        for ts, x, m, row in zip(stamps, obs, fc.observed, fans):
            w.writerow([format_timestamp(ts), repr(float(x)) if m else "", int(m)]
                       + [repr(float(v)) for v in row])
