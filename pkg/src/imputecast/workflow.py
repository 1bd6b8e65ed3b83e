"""Glue shared by the CLI and the experiment tests: corrupt, normalize, train
with one of the three methods, evaluate on the test segment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .baselines import ImputerSpec, run_two_phase
from .metrics import EvaluationReport, SeriesForecast, evaluate_model
from .model import ForecasterParams
from .pipeline import MinMax, SplitSpec, TimeSeries, apply_mcar, minmax_fit_apply
from .train import TrainConfig, TrainReport, fit

METHODS = ("endtoend", "li", "knn")


@dataclass
class Prepared:
    series: TimeSeries  # normalized, with simulated gaps
    scaler: MinMax
    split: SplitSpec


def prepare(raw: TimeSeries, missing_rate: float, seed: int,
            split: SplitSpec = SplitSpec()) -> Prepared:
    corrupted = apply_mcar(raw, missing_rate, seed)
    normed, scaler = minmax_fit_apply(corrupted, split)
    return Prepared(normed, scaler, split)


def imputer_for(method: str, cfg: TrainConfig, knn_k: int = 5) -> Optional[ImputerSpec]:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if method == "endtoend":
        return None
    if method == "li":
        return ImputerSpec("linear")
    return ImputerSpec("knn", k=knn_k, window=cfg.lag)


def train_method(prep: Prepared, method: str, cfg: TrainConfig, knn_k: int = 5,
                 progress=None) -> tuple[ForecasterParams, TrainReport]:
    imputer = imputer_for(method, cfg, knn_k)
    if imputer is None:
        return fit(prep.series, cfg, prep.split, progress=progress)
    return run_two_phase(prep.series, imputer, cfg, prep.split, progress=progress)


def evaluation_segment(series: TimeSeries, split: SplitSpec, lag: int) -> TimeSeries:
    """Test split preceded by ``lag`` context positions."""
    _, b = split.bounds(len(series))
    return series.slice(max(b - lag, 0), len(series))


def evaluate_test(params: ForecasterParams, prep: Prepared, cfg: TrainConfig,
                  meta: Optional[dict] = None) -> tuple[EvaluationReport, SeriesForecast, TimeSeries]:
    seg = evaluation_segment(prep.series, prep.split, params.arch.lag)
    report, fc = evaluate_model(params, seg, cfg.levels, meta=meta)
    return report, fc, seg
