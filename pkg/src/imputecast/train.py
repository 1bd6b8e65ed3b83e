"""End-to-end training with iterative median imputation.

A sequence instance is rolled forward window by window. Whenever the next
target is missing, the model's own median forecast for it is written into
the series and read by the following windows. The loss is the pinball loss
over observed targets only, averaged over the ``T`` windows. Gradients flow
back through the imputed values unless ``grad_through_imputation`` is off.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .model import Arch, ForecasterParams, backward_batch, forward_batch
from .numkernel import OptimizerConfig, OptimizerState, optimizer_step
from .pipeline import InstanceBatch, SplitSpec, TimeSeries, make_instances, stack_instances

log = logging.getLogger(__name__)

DEFAULT_LEVELS = tuple(round(0.05 * i, 2) for i in range(1, 20))

# grid and optimum reported for the wind-farm study; lag in minutes
SEARCH_GRID = {
    "n_layers": (8, 16, 32, 64),
    "hidden": (16, 32, 64, 128),
    "lag_minutes": (5, 10, 15, 20),
    "lr": (1e-4, 1e-3, 1e-2, 1e-1),
}
DEFAULT_OPTIMUM = {"n_layers": 16, "hidden": 32, "lag_minutes": 15, "lr": 1e-3}


CACHE_BUDGET = 512 * 2**20


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    levels: tuple = DEFAULT_LEVELS
    lr: float = 1e-3
    batch_size: int = 64
    T: int = 32
    lag: int = 3
    n_layers: int = 16
    hidden: int = 32
    seed: int = 0
    patience: int = 20
    max_epochs: int = 200
    grad_through_imputation: bool = True
    optimizer: str = "adam"
    val_stride: Optional[int] = None

    def __post_init__(self):
        levels = tuple(float(a) for a in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels or any(not 0.0 < a < 1.0 for a in levels):
            raise ValueError("quantile levels must lie in (0, 1)")
        if list(levels) != sorted(set(levels)):
            raise ValueError("quantile levels must be sorted and distinct")
        if 0.5 not in levels:
            raise ValueError("quantile levels must contain 0.5 (used for imputation)")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1 or self.T < 1:
            raise ValueError("patience, max_epochs, batch_size and T must be >= 1")

    @property
    def arch(self) -> Arch:
        return Arch(self.n_layers, self.hidden, self.lag)

    @property
    def median_index(self) -> int:
        return self.levels.index(0.5)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(kind=self.optimizer, lr=self.lr)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: v for k, v in d.items() if k in known}
        if "levels" in kw:
            kw["levels"] = tuple(kw["levels"])
        return cls(**kw)


# ---------------------------------------------------------------------------
# losses


def pinball(value: float, quantiles, levels) -> float:
    """Sum over levels of the pinball loss of ``quantiles`` against ``value``."""
    q = np.asarray(quantiles, dtype=np.float64)
    a = np.asarray(levels, dtype=np.float64)
    if q.shape != a.shape:
        raise ValueError("one quantile per level required")
    diff = value - q
    return float(np.sum(a * np.maximum(0.0, diff) + (1.0 - a) * np.maximum(0.0, -diff)))


def masked_step_loss(target: float, target_mask, quantiles, levels) -> float:
    if not target_mask:
        return 0.0
    return pinball(target, quantiles, levels)


def _pinball_terms(y: np.ndarray, q: np.ndarray, a: np.ndarray):
    """Element-wise pinball value and its derivative w.r.t. ``q``."""
    diff = y - q
    above = diff >= 0
    loss = np.where(above, a * diff, (a - 1.0) * diff)
    dq = np.where(above, -a, 1.0 - a)
    return loss, dq


# ---------------------------------------------------------------------------
# rollout


@dataclass
class Rollout:
    """Result of rolling a batch of instances forward.

    ``filled`` holds the model inputs over ``lag + T`` positions; ``fans`` the
    raw (unsorted) quantile outputs ``(N, T, Q)``; ``medians`` the raw
    alpha=0.5 outputs ``(N, T)``; ``from_model`` flags positions whose input
    came from the model median; ``loss`` the per-instance recurrent loss.
    """

    filled: np.ndarray
    fans: np.ndarray
    medians: np.ndarray
    from_model: np.ndarray
    loss: np.ndarray
    caches: Optional[list] = None


def _expand(windows: np.ndarray, levels: np.ndarray):
    n_q = levels.size
    return np.repeat(windows, n_q, axis=0), np.tile(levels, windows.shape[0])


def rollout_batch(params: ForecasterParams, batch: InstanceBatch, levels: Sequence[float],
                  keep_cache: bool = False) -> Rollout:
    levels = np.asarray(levels, dtype=np.float64)
    mid = int(np.flatnonzero(levels == 0.5)[0])
    N, T = batch.targets.shape
    lag = params.arch.lag
    n_q = levels.size
    filled = np.empty((N, lag + T))
    filled[:, :lag] = batch.first
    fans = np.empty((N, T, n_q))
    caches = [] if keep_cache else None
    for j in range(T):
        w, a = _expand(filled[:, j:j + lag], levels)
        y, extra = forward_batch(params, w, a, keep_cache=keep_cache)
        if keep_cache:
            caches.append(extra)
        fans[:, j] = y.reshape(N, n_q)
        m = batch.tmask[:, j]
        filled[:, lag + j] = np.where(m, batch.targets[:, j], fans[:, j, mid])
    loss_terms, _ = _pinball_terms(batch.targets[:, :, None], fans, levels)
    per_step = (loss_terms.sum(axis=2)) * batch.tmask
    return Rollout(filled, fans, fans[:, :, mid].copy(), ~batch.tmask.astype(bool),
                   per_step.mean(axis=1), caches)


def rollout_sequence(params: ForecasterParams, instance, cfg: TrainConfig):
    """Roll a single :class:`SequenceInstance` forward.

    Returns ``(fans (T, Q) raw, imputed inputs (lag + T,), L_rec)``.
    """
    r = rollout_batch(params, stack_instances([instance]), cfg.levels)
    return r.fans[0], r.filled[0], float(r.loss[0])


def _cache_bytes(arch: Arch, n_rows: int, T: int) -> int:
    per_step = 8 * n_rows * (9 * arch.hidden + 2)
    return per_step * arch.n_layers * arch.lag * T


def loss_and_grad(params: ForecasterParams, batch: InstanceBatch, levels: Sequence[float],
                  through_imputation: bool = True, cache_budget: int = CACHE_BUDGET):
    """Mean recurrent loss over the batch and its gradient as a flat vector.

    Activations of all windows are kept when they fit in ``cache_budget``
    bytes; otherwise each window is recomputed during the reverse sweep.
    """
    levels_arr = np.asarray(levels, dtype=np.float64)
    mid = int(np.flatnonzero(levels_arr == 0.5)[0])
    N, T = batch.targets.shape
    lag = params.arch.lag
    n_q = levels_arr.size
    keep = _cache_bytes(params.arch, N * n_q, T) <= cache_budget
    r = rollout_batch(params, batch, levels_arr, keep_cache=keep)

    _, dq_all = _pinball_terms(batch.targets[:, :, None], r.fans, levels_arr)
    dq_all = dq_all * (batch.tmask[:, :, None] / (N * T))

    grad = np.zeros(params.size)
    d_filled = np.zeros((N, lag + T))
    for j in reversed(range(T)):
        dq = dq_all[:, j].copy()
        if through_imputation:
            dq[:, mid] += np.where(r.from_model[:, j], d_filled[:, lag + j], 0.0)
        if not dq.any():
            continue
        if keep:
            cache = r.caches[j]
        else:
            w, a = _expand(r.filled[:, j:j + lag], levels_arr)
            _, cache = forward_batch(params, w, a, keep_cache=True)
        g, dwin = backward_batch(params, cache, dq.ravel())
        grad += g.flat()
        if through_imputation:
            d_filled[:, j:j + lag] += dwin.reshape(N, n_q, lag).sum(axis=1)
    return float(r.loss.mean()), grad


def audit_rollout(r: Rollout, batch: InstanceBatch) -> float:
    """Fraction of recorded inputs that are exactly the observation (mask 1)
    or exactly the model median (mask 0)."""
    lag = r.filled.shape[1] - r.medians.shape[1]
    inputs = r.filled[:, lag:]
    ok = np.where(batch.tmask, inputs == batch.targets, inputs == r.medians)
    ok &= r.from_model == ~batch.tmask.astype(bool)
    return float(ok.mean())


# ---------------------------------------------------------------------------
# epochs


def _iter_chunks(n: int, size: int):
    for a in range(0, n, size):
        yield a, min(a + size, n)


def train_epoch(params: ForecasterParams, data: InstanceBatch, cfg: TrainConfig,
                opt_state: OptimizerState, epoch: int = 0):
    """One pass over ``data`` in seeded shuffled order.

    Returns ``(params, opt_state, mean_loss)`` where the mean is over
    instances, each batch's loss measured before its update.
    """
    n = len(data)
    if n == 0:
        raise TrainingError("no training instances")
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    hyper = cfg.optimizer_config()
    total = 0.0
    flat = params.flat()
    for b, (a, z) in enumerate(_iter_chunks(n, cfg.batch_size)):
        batch = data.take(order[a:z])
        loss, grad = loss_and_grad(params, batch, cfg.levels, cfg.grad_through_imputation)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss in epoch {epoch}, batch {b}, "
                                f"optimizer step {opt_state.step}")
        total += loss * (z - a)
        flat, opt_state = optimizer_step(flat, grad, opt_state, hyper)
        params = params.with_flat(flat)
    return params, opt_state, total / n


def validation_loss(params: ForecasterParams, data: InstanceBatch, cfg: TrainConfig,
                    chunk: int = 256) -> float:
    if len(data) == 0:
        raise TrainingError("no validation instances")
    total = 0.0
    for a, z in _iter_chunks(len(data), chunk):
        total += rollout_batch(params, data.take(np.arange(a, z)), cfg.levels).loss.sum()
    return float(total / len(data))


class EarlyStopper:
    """Stops once the training loss has been strictly below the validation
    loss for ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.streak = 0

    def update(self, train_loss: float, val_loss: float) -> bool:
        self.streak = self.streak + 1 if train_loss < val_loss else 0
        return self.streak >= self.patience


@dataclass
class TrainReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    stop_epoch: int = 0
    stop_reason: str = ""
    best_epoch: int = 0
    best_val_loss: float = math.inf
    checkpoint: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def prepare_instances(series: TimeSeries, cfg: TrainConfig, split: SplitSpec):
    train_s, val_s, _ = split.split(series)
    train = stack_instances(make_instances(train_s, cfg.lag, cfg.T, cfg.T))
    val = stack_instances(make_instances(val_s, cfg.lag, cfg.T, cfg.val_stride or cfg.T))
    return train, val


def fit(series: TimeSeries, cfg: TrainConfig, split: SplitSpec = SplitSpec(),
        progress: Optional[Callable[[int, float, float], None]] = None):
    """Train from scratch on the (normalized) series.

    Returns ``(best_params, TrainReport)``; the parameters are those of the
    epoch with the lowest validation loss.
    """
    train_data, val_data = prepare_instances(series, cfg, split)
    params = ForecasterParams.init(cfg.arch, cfg.seed)
    opt_state = OptimizerState.zeros(params.size)
    stopper = EarlyStopper(cfg.patience)
    report = TrainReport()
    best = params.copy()
    for epoch in range(1, cfg.max_epochs + 1):
        params, opt_state, tr = train_epoch(params, train_data, cfg, opt_state, epoch)
        va = validation_loss(params, val_data, cfg)
        if not (math.isfinite(tr) and math.isfinite(va)):
            raise TrainingError(f"non-finite loss at epoch {epoch}: train={tr}, val={va}")
        report.train_losses.append(tr)
        report.val_losses.append(va)
        if progress is not None:
            progress(epoch, tr, va)
        log.debug("epoch %d train %.6f val %.6f", epoch, tr, va)
        if va < report.best_val_loss:
            report.best_val_loss, report.best_epoch = va, epoch
            best = params.copy()
        report.stop_epoch = epoch
        if stopper.update(tr, va):
            report.stop_reason = "early-stop"
            break
    else:
        report.stop_reason = "max-epochs"
    return best, report


# ---------------------------------------------------------------------------
# grid search


GRID_KEYS = ("n_layers", "hidden", "lag_minutes", "lr")


@dataclass
class GridResult:
    point: dict
    val_loss: float
    config: Optional[TrainConfig] = None
    error: Optional[str] = None


def grid_search(series: TimeSeries, grids: dict, split: SplitSpec, seed: int,
                base: TrainConfig = TrainConfig(), resolution: Optional[int] = None,
                fit_fn: Callable = None):
    """Train one model per grid point and return the best configuration.

    ``grids`` maps ``n_layers``, ``hidden``, ``lag_minutes`` and ``lr`` to
    candidate values (missing keys keep ``base``). Ties go to the smaller
    ``n_layers``, then ``hidden``, ``lag_minutes`` and ``lr``.
    Returns ``(best TrainConfig, list[GridResult])``.
    """
    from .pipeline import lag_steps

    fit_fn = fit_fn or fit
    resolution = resolution or series.resolution
    axes = []
    for key in GRID_KEYS:
        if key in grids:
            vals = list(grids[key])
            if not vals:
                raise ValueError(f"empty grid for {key}")
        elif key == "lag_minutes":
            vals = [base.lag * resolution / 60.0]
        else:
            vals = [getattr(base, key)]
        axes.append(sorted(vals))
    results: list[GridResult] = []
    for idx, combo in enumerate(itertools.product(*axes)):
        point = dict(zip(GRID_KEYS, combo))
        cfg = None
        try:
            derived = int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])
            cfg = replace(base, n_layers=int(point["n_layers"]), hidden=int(point["hidden"]),
                          lag=lag_steps(point["lag_minutes"], resolution), lr=float(point["lr"]),
                          seed=derived)
            _, report = fit_fn(series, cfg, split)
            results.append(GridResult(point, float(report.best_val_loss), cfg))
        except Exception as exc:  # one failing point must not end the search
            log.warning("grid point %s failed: %s", point, exc)
            results.append(GridResult(point, math.inf, cfg, f"{type(exc).__name__}: {exc}"))
    ok = [r for r in results if r.error is None and math.isfinite(r.val_loss)]
    if not ok:
        raise TrainingError("every grid point failed")
    best = min(ok, key=lambda r: (r.val_loss,) + tuple(r.point[k] for k in GRID_KEYS))
    return best.config, results
