"""Two-phase baselines: impute the whole series first, then train the same
quantile forecaster on the completed series."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .pipeline import DataError, SplitSpec, TimeSeries, linear_fill
from .train import TrainConfig, fit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImputerSpec:
    kind: str = "linear"
    k: int = 5
    window: int = 3

    def __post_init__(self):
        if self.kind not in ("linear", "knn"):
            raise ValueError(f"unknown imputer {self.kind!r}")
        if self.k < 1 or self.window < 1:
            raise ValueError("k and window must be >= 1")


def _completed(series: TimeSeries, values: np.ndarray) -> TimeSeries:
    source = series.mask.copy() if series.source_mask is None else series.source_mask
    return replace(series, values=values, mask=np.ones(len(series), dtype=bool), source_mask=source)


def impute_linear(series: TimeSeries) -> TimeSeries:
    """Fill gaps by straight lines between the bracketing observations.

    Leading and trailing gaps repeat the nearest observation. The returned
    series is fully observed; the input mask is kept in ``source_mask``.
    """
    if not series.mask.any():
        raise DataError("cannot impute a series with no observed values")
    return _completed(series, linear_fill(series.values, series.mask))


@dataclass
class KnnResult:
    series: TimeSeries
    fallback: bool = False


def _query_start(p: int, w: int, n: int) -> int:
    # window roughly centred on p, shifted to stay inside the series
    return min(max(p - w // 2, 0), n - w)


def impute_knn(series: TimeSeries, spec: ImputerSpec = ImputerSpec("knn")) -> KnnResult:
    """k-nearest-neighbour pattern imputation.

    For a missing index the length-``window`` query window around it is
    compared, on its observed positions only, with every fully observed
    window of the series (Euclidean distance). The fill is the mean of the
    ``k`` closest windows' values at the missing position; ties go to the
    earlier window. Query windows with no observed position, or a series
    with fewer than ``k`` complete windows, fall back to linear interpolation
    and set ``fallback``.
    """
    n, w, k = len(series), spec.window, spec.k
    if not series.mask.any():
        raise DataError("cannot impute a series with no observed values")
    if n < w:
        log.warning("series shorter than the knn window; using linear interpolation")
        return KnnResult(impute_linear(series), True)

    vals = np.where(series.mask, series.values, 0.0)
    complete = np.lib.stride_tricks.sliding_window_view(series.mask, w).all(axis=1)
    starts = np.flatnonzero(complete)
    if starts.size < k:
        log.warning("only %d complete windows for k=%d; using linear interpolation",
                    starts.size, k)
        return KnnResult(impute_linear(series), True)
    cand = np.lib.stride_tricks.sliding_window_view(vals, w)[starts]  # (n_cand, w)

    linear = None
    fallback = False
    out = series.values.copy()
    for p in np.flatnonzero(~series.mask):
        a = _query_start(p, w, n)
        qmask = series.mask[a:a + w]
        if not qmask.any():
            if linear is None:
                linear = linear_fill(series.values, series.mask)
            out[p] = linear[p]
            fallback = True
            continue
        diff = cand[:, qmask] - vals[a:a + w][qmask]
        d = np.einsum("ij,ij->i", diff, diff)
        if k < d.size:
            kth = np.partition(d, k - 1)[k - 1]
            near = np.flatnonzero(d <= kth)
            near = near[np.argsort(d[near], kind="stable")][:k]
        else:
            near = np.argsort(d, kind="stable")[:k]
        out[p] = cand[near, p - a].mean()
    return KnnResult(_completed(series, out), fallback)


def impute(series: TimeSeries, spec: ImputerSpec) -> TimeSeries:
    if spec.kind == "linear":
        return impute_linear(series)
    return impute_knn(series, spec).series


def run_two_phase(series: TimeSeries, imputer: ImputerSpec, cfg: TrainConfig,
                  split: SplitSpec = SplitSpec(), progress=None):
    """Impute the full series with ``imputer`` and fit the forecaster on it.

    Every position is treated as observed during training, so the imputed
    values become ordinary inputs and targets.
    """
    completed = impute(series, imputer)
    return fit(completed, cfg, split, progress=progress)
