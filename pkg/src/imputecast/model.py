"""Quantile forecaster: residual stack of peephole LSTM layers plus a dense head.

The network maps a lag window of ``lag`` observations and a nominal
proportion ``alpha`` to the alpha-quantile of the next observation. ``alpha``
is fed as a second input feature at every time step of the first layer;
from the second layer on, each layer adds its input to its hidden output
(identity skip). The hidden state starts from zero for every window.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numkernel import (
    DTYPE,
    ContractError,
    DenseParams,
    LayerState,
    LstmLayerParams,
    dense_backward,
    dense_forward,
    lstm_step,
    lstm_step_backward,
)

CHECKPOINT_FORMAT = "imputecast-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Arch:
    n_layers: int
    hidden: int
    lag: int

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden < 1 or self.lag < 1:
            raise ValueError(f"invalid architecture {self}")


@dataclass
class ForecasterParams:
    layers: list[LstmLayerParams]
    head: DenseParams
    arch: Arch

    def __post_init__(self):
        if len(self.layers) != self.arch.n_layers:
            raise ContractError(f"{len(self.layers)} layers for n_layers={self.arch.n_layers}")
        for k, layer in enumerate(self.layers):
            want_in = 2 if k == 0 else self.arch.hidden
            if layer.hidden_size != self.arch.hidden or layer.input_size != want_in:
                raise ContractError(f"layer {k} has shape ({layer.input_size}->{layer.hidden_size})")
        if self.head.weight.shape != (self.arch.hidden, 1):
            raise ContractError(f"head weight shape {self.head.weight.shape}")

    @classmethod
    def init(cls, arch: Arch, seed: int) -> "ForecasterParams":
        rng = np.random.default_rng(seed)
        layers = [LstmLayerParams.init(2 if k == 0 else arch.hidden, arch.hidden, rng)
                  for k in range(arch.n_layers)]
        return cls(layers, DenseParams.init(arch.hidden, 1, rng), arch)

    @classmethod
    def zeros(cls, arch: Arch) -> "ForecasterParams":
        layers = [LstmLayerParams.zeros(2 if k == 0 else arch.hidden, arch.hidden)
                  for k in range(arch.n_layers)]
        return cls(layers, DenseParams.zeros(arch.hidden, 1), arch)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.arrays())
        out.extend(self.head.arrays())
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "ForecasterParams":
        """New parameter set of the same architecture holding ``vec``."""
        vec = np.asarray(vec, dtype=DTYPE)
        chunks = []
        pos = 0
        for a in self.arrays():
            chunks.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        if pos != vec.size:
            raise ContractError(f"flat vector has {vec.size} entries, expected {pos}")
        layers = [LstmLayerParams(*chunks[4 * k:4 * k + 4]) for k in range(self.arch.n_layers)]
        return ForecasterParams(layers, DenseParams(*chunks[-2:]), self.arch)

    def copy(self) -> "ForecasterParams":
        return self.with_flat(self.flat())

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass
class QuantileFan:
    """Quantile forecasts for one origin, keyed by nominal proportion."""

    origin: int
    levels: tuple[float, ...]
    values: np.ndarray
    lead: int = 1

    def __post_init__(self):
        self.levels = tuple(float(a) for a in self.levels)
        self.values = np.asarray(self.values, dtype=DTYPE)
        if self.values.shape != (len(self.levels),):
            raise ContractError("one value per level required")

    def as_dict(self) -> dict[float, float]:
        return dict(zip(self.levels, self.values.tolist()))

    def __getitem__(self, alpha: float) -> float:
        try:
            return float(self.values[self.levels.index(float(alpha))])
        except ValueError:
            raise KeyError(alpha) from None


@dataclass
class WindowCache:
    steps: list = field(default_factory=list)  # steps[s][k] -> StepCache
    top: Optional[np.ndarray] = None


def _check_window(windows: np.ndarray, lag: int) -> np.ndarray:
    windows = np.asarray(windows, dtype=DTYPE)
    if windows.shape[-1] != lag:
        raise ContractError(f"window has length {windows.shape[-1]}, expected lag {lag}")
    if not np.all(np.isfinite(windows)):
        raise ContractError("window contains missing markers; impute before calling forward")
    return windows


def forward_batch(params: ForecasterParams, windows: np.ndarray, alphas: np.ndarray,
                  keep_cache: bool = False):
    """Batched forward pass.

    ``windows`` is ``(B, lag)``, ``alphas`` is ``(B,)``. Returns the raw
    quantile outputs ``(B,)`` and, if requested, a :class:`WindowCache`.
    """
    arch = params.arch
    windows = _check_window(windows, arch.lag)
    if windows.ndim != 2:
        raise ContractError("forward_batch expects a 2-d array of windows")
    B = windows.shape[0]
    alphas = np.broadcast_to(np.asarray(alphas, dtype=DTYPE), (B,))
    states = [LayerState.zeros(arch.hidden, B) for _ in range(arch.n_layers)]
    cache = WindowCache() if keep_cache else None
    out = None
    x_in = np.empty((B, 2))
    x_in[:, 1] = alphas
    for s in range(arch.lag):
        x_in[:, 0] = windows[:, s]
        inp = x_in.copy()
        step_caches = []
        for k, layer in enumerate(params.layers):
            if keep_cache:
                states[k], sc = lstm_step(layer, inp, states[k], return_cache=True)
                step_caches.append(sc)
            else:
                states[k] = lstm_step(layer, inp, states[k])
            out = states[k].h if k == 0 else inp + states[k].h
            inp = out
        if keep_cache:
            cache.steps.append(step_caches)
    y = dense_forward(params.head, out)[:, 0]
    if keep_cache:
        cache.top = out
        return y, cache
    return y, states


def backward_batch(params: ForecasterParams, cache: WindowCache, dy: np.ndarray):
    """Gradients of ``sum(dy * y)`` w.r.t. parameters and window values.

    Returns ``(grads: ForecasterParams, dwindows: (B, lag))``.
    """
    arch = params.arch
    dy = np.asarray(dy, dtype=DTYPE).reshape(-1, 1)
    B = dy.shape[0]
    g_head, dtop = dense_backward(params.head, cache.top, dy)
    g_layers = [LstmLayerParams.zeros(layer.input_size, arch.hidden) for layer in params.layers]
    dh_rec = [np.zeros((B, arch.hidden)) for _ in params.layers]
    dc_rec = [np.zeros((B, arch.hidden)) for _ in params.layers]
    dwin = np.zeros((B, arch.lag))
    zero = np.zeros((B, arch.hidden))
    for s in reversed(range(arch.lag)):
        dout = dtop if s == arch.lag - 1 else zero
        for k in reversed(range(arch.n_layers)):
            g, dx, dprev = lstm_step_backward(params.layers[k], cache.steps[s][k],
                                              dout + dh_rec[k], dc_rec[k])
            gk = g_layers[k]
            gk.wx += g.wx
            gk.wh += g.wh
            gk.wc += g.wc
            gk.b += g.b
            dh_rec[k], dc_rec[k] = dprev.h, dprev.c
            if k > 0:
                dout = dx + dout
            else:
                dwin[:, s] = dx[:, 0]
    return ForecasterParams(g_layers, g_head, arch), dwin


def forward(params: ForecasterParams, window: np.ndarray, alpha: float):
    """Single-window forward pass.

    Returns ``(quantile_value, states)`` where ``states`` holds the final
    :class:`LayerState` of every layer.
    """
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"alpha must lie in (0, 1), got {alpha}")
    window = np.asarray(window, dtype=DTYPE)
    if window.ndim != 1:
        raise ContractError("forward expects a 1-d window")
    y, states = forward_batch(params, window[None, :], np.array([alpha]))
    return float(y[0]), [LayerState(s.h[0], s.c[0]) for s in states]


def monotonize(raw: np.ndarray) -> np.ndarray:
    """Repair quantile crossing by sorting along the last axis."""
    return np.sort(raw, axis=-1)


def fan_values(params: ForecasterParams, windows: np.ndarray, levels: Sequence[float],
               sort: bool = True) -> np.ndarray:
    """Quantile forecasts for many windows at once, shape ``(B, len(levels))``."""
    levels = np.asarray(levels, dtype=DTYPE)
    windows = np.atleast_2d(np.asarray(windows, dtype=DTYPE))
    B, n_q = windows.shape[0], levels.size
    y, _ = forward_batch(params, np.repeat(windows, n_q, axis=0), np.tile(levels, B))
    y = y.reshape(B, n_q)
    return monotonize(y) if sort else y


def forecast_fan(params: ForecasterParams, window: np.ndarray, levels: Sequence[float],
                 origin: int = 0) -> QuantileFan:
    levels = sorted(float(a) for a in levels)
    if not levels or any(not 0.0 < a < 1.0 for a in levels):
        raise ContractError("quantile levels must be a non-empty subset of (0, 1)")
    vals = fan_values(params, np.asarray(window)[None, :], levels)[0]
    return QuantileFan(origin, tuple(levels), vals)


def median_forecast(params: ForecasterParams, window: np.ndarray) -> float:
    return forward(params, window, 0.5)[0]


# ---------------------------------------------------------------------------
# checkpoint container


def _encode(a: np.ndarray) -> dict:
    le = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(le.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(d["shape"])


def checkpoint_dict(params: ForecasterParams, levels: Sequence[float],
                    norm: Optional[dict] = None, meta: Optional[dict] = None) -> dict:
    tensors = {}
    for k, layer in enumerate(params.layers):
        for name, arr in zip(("wx", "wh", "wc", "b"), layer.arrays()):
            tensors[f"layer{k}.{name}"] = _encode(arr)
    tensors["head.weight"] = _encode(params.head.weight)
    tensors["head.bias"] = _encode(params.head.bias)
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": {"n_layers": params.arch.n_layers, "hidden": params.arch.hidden,
                 "lag": params.arch.lag},
        "levels": [float(a) for a in levels],
        "normalization": norm or {},
        "meta": meta or {},
        "tensors": tensors,
    }


def save_checkpoint(path, params: ForecasterParams, levels: Sequence[float],
                    norm: Optional[dict] = None, meta: Optional[dict] = None) -> str:
    """Write a checkpoint; returns the sha256 of the written bytes."""
    text = json.dumps(checkpoint_dict(params, levels, norm, meta), indent=1, sort_keys=True)
    data = (text + "\n").encode("utf-8")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    """Returns ``(params, levels, normalization, meta)``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arch = Arch(**doc["arch"])
    t = doc["tensors"]
    layers = [LstmLayerParams(*(_decode(t[f"layer{k}.{n}"]) for n in ("wx", "wh", "wc", "b")))
              for k in range(arch.n_layers)]
    head = DenseParams(_decode(t["head.weight"]), _decode(t["head.bias"]))
    return ForecasterParams(layers, head, arch), tuple(doc["levels"]), doc["normalization"], doc["meta"]


def params_digest(params: ForecasterParams) -> str:
    """sha256 over the raw little-endian parameter bytes."""
    h = hashlib.sha256()
    for a in params.arrays():
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()
