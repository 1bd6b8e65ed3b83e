"""Numeric kernels: peephole LSTM layer, dense head and optimizers.

All arrays are float64. Step functions accept a single vector of shape
``(D,)`` or a batch of shape ``(B, D)``; batched inputs are what the model
and trainer use internally.

Gate ordering inside the packed tensors is input, forget, candidate, output.
Peephole weights only exist for the three sigmoid gates (input, forget,
output), each reading the *previous* cell state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DTYPE = np.float64


class ContractError(ValueError):
    """Raised when a kernel is called with inputs that break its contract."""


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * np.tanh(0.5 * np.asarray(z, dtype=DTYPE)) + 0.5


_AFFINE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gate_affine(H: int):
    if H not in _AFFINE:
        scale = np.full(4 * H, 0.5)
        scale[2 * H:3 * H] = 1.0
        shift = np.full(4 * H, 0.5)
        shift[2 * H:3 * H] = 0.0
        _AFFINE[H] = (scale, shift)
    return _AFFINE[H]


@dataclass
class LstmLayerParams:
    """Weights of one peephole LSTM layer, stored packed.

    ``wx`` is ``(4H, D)``, ``wh`` is ``(4H, H)``, ``wc`` is ``(3H, H)`` (rows
    for the input, forget and output gates) and ``b`` is ``(4H,)``. The named
    properties (``w_ix``, ``w_fc``, ``b_o`` ...) are views into these.
    """

    wx: np.ndarray
    wh: np.ndarray
    wc: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.wx = np.asarray(self.wx, dtype=DTYPE)
        self.wh = np.asarray(self.wh, dtype=DTYPE)
        self.wc = np.asarray(self.wc, dtype=DTYPE)
        self.b = np.asarray(self.b, dtype=DTYPE)
        H = self.hidden_size
        if self.wx.shape[0] != 4 * H or self.wh.shape != (4 * H, H):
            raise ContractError(f"inconsistent LSTM weight shapes {self.wx.shape}, {self.wh.shape}")
        if self.wc.shape != (3 * H, H) or self.b.shape != (4 * H,):
            raise ContractError(f"inconsistent peephole/bias shapes {self.wc.shape}, {self.b.shape}")

    @property
    def hidden_size(self) -> int:
        return self.wh.shape[1]

    @property
    def input_size(self) -> int:
        return self.wx.shape[1]

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "LstmLayerParams":
        H = hidden_size
        return cls(np.zeros((4 * H, input_size)), np.zeros((4 * H, H)),
                   np.zeros((3 * H, H)), np.zeros(4 * H))

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> "LstmLayerParams":
        """Uniform(-1/sqrt(H), 1/sqrt(H)) weights, forget-gate bias 1."""
        H = hidden_size
        s = 1.0 / np.sqrt(H)
        p = cls(rng.uniform(-s, s, (4 * H, input_size)),
                rng.uniform(-s, s, (4 * H, H)),
                rng.uniform(-s, s, (3 * H, H)),
                rng.uniform(-s, s, 4 * H))
        p.b[H:2 * H] = 1.0
        return p

    def arrays(self) -> list[np.ndarray]:
        return [self.wx, self.wh, self.wc, self.b]

    def _gate(self, arr, gate, peephole=False):
        H = self.hidden_size
        if peephole:
            k = {"i": 0, "f": 1, "o": 2}[gate]
        else:
            k = "ifco".index(gate)
        return arr[k * H:(k + 1) * H]

    # per-gate views, named after the update equations
    w_ix = property(lambda s: s._gate(s.wx, "i"))
    w_fx = property(lambda s: s._gate(s.wx, "f"))
    w_cx = property(lambda s: s._gate(s.wx, "c"))
    w_ox = property(lambda s: s._gate(s.wx, "o"))
    w_ih = property(lambda s: s._gate(s.wh, "i"))
    w_fh = property(lambda s: s._gate(s.wh, "f"))
    w_ch = property(lambda s: s._gate(s.wh, "c"))
    w_oh = property(lambda s: s._gate(s.wh, "o"))
    w_ic = property(lambda s: s._gate(s.wc, "i", True))
    w_fc = property(lambda s: s._gate(s.wc, "f", True))
    w_oc = property(lambda s: s._gate(s.wc, "o", True))
    b_i = property(lambda s: s._gate(s.b, "i"))
    b_f = property(lambda s: s._gate(s.b, "f"))
    b_c = property(lambda s: s._gate(s.b, "c"))
    b_o = property(lambda s: s._gate(s.b, "o"))


@dataclass
class DenseParams:
    """Affine head: ``y = x @ weight + bias`` with ``weight`` of shape (H, out)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ContractError(f"dense shapes {self.weight.shape} / {self.bias.shape} disagree")

    @classmethod
    def zeros(cls, in_size: int, out_size: int = 1) -> "DenseParams":
        return cls(np.zeros((in_size, out_size)), np.zeros(out_size))

    @classmethod
    def init(cls, in_size: int, out_size: int, rng: np.random.Generator) -> "DenseParams":
        s = 1.0 / np.sqrt(in_size)
        return cls(rng.uniform(-s, s, (in_size, out_size)), np.zeros(out_size))

    def arrays(self) -> list[np.ndarray]:
        return [self.weight, self.bias]


@dataclass
class LayerState:
    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if np.shape(self.h) != np.shape(self.c):
            raise ContractError(f"hidden {np.shape(self.h)} and cell {np.shape(self.c)} sizes differ")

    @classmethod
    def zeros(cls, hidden_size: int, batch: Optional[int] = None) -> "LayerState":
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class StepCache:
    """Intermediates of one ``lstm_step`` call needed by the backward pass.

    ``xhc`` is the concatenated ``[x, h_prev, c_prev]`` input and ``act`` the
    activated gates ``[i, f, g, o]``.
    """

    xhc: np.ndarray
    act: np.ndarray
    tanh_c: np.ndarray
    input_size: int
    squeeze: bool = field(default=False)

    @property
    def x(self):
        return self.xhc[:, :self.input_size]

    @property
    def h_prev(self):
        H = self.tanh_c.shape[1]
        return self.xhc[:, self.input_size:self.input_size + H]

    @property
    def c_prev(self):
        H = self.tanh_c.shape[1]
        return self.xhc[:, self.input_size + H:]


def _as_batch(a: np.ndarray, size: int, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if a.shape[-1] != size:
        raise ContractError(f"{what} has length {a.shape[-1]}, expected {size}")
    return a.reshape(1, size) if a.ndim == 1 else a


def _stacked_weights(params: LstmLayerParams) -> np.ndarray:
    """``(D + 2H, 4H)`` matrix mapping ``[x, h, c]`` to gate pre-activations."""
    H, D = params.hidden_size, params.input_size
    w = np.zeros((D + 2 * H, 4 * H))
    w[:D] = params.wx.T
    w[D:D + H] = params.wh.T
    wc = params.wc.T
    w[D + H:, :2 * H] = wc[:, :2 * H]
    w[D + H:, 3 * H:] = wc[:, 2 * H:]
    return w


def lstm_step(params: LstmLayerParams, x: np.ndarray, prev: LayerState,
              return_cache: bool = False):
    """Advance one peephole LSTM layer by one time step.

    Returns the new :class:`LayerState`, and the :class:`StepCache` as a
    second value when ``return_cache`` is set.
    """
    H, D = params.hidden_size, params.input_size
    squeeze = np.ndim(x) == 1
    xb = _as_batch(x, D, "input")
    h = _as_batch(prev.h, H, "previous hidden state")
    c = _as_batch(prev.c, H, "previous cell state")
    if not (xb.shape[0] == h.shape[0] == c.shape[0]):
        raise ContractError("batch sizes of input and state differ")

    xhc = np.concatenate([xb, h, c], axis=1)
    z = xhc @ _stacked_weights(params)
    z += params.b
    # sigmoid(u) = 0.5 * tanh(u / 2) + 0.5, fused with the candidate tanh
    scale, shift = _gate_affine(H)
    z *= scale
    np.tanh(z, out=z)
    z *= scale
    z += shift
    c_new = z[:, H:2 * H] * c
    c_new += z[:, :H] * z[:, 2 * H:3 * H]
    tanh_c = np.tanh(c_new)
    h_new = z[:, 3 * H:] * tanh_c

    if squeeze:
        state = LayerState(h_new[0], c_new[0])
    else:
        state = LayerState(h_new, c_new)
    if not return_cache:
        return state
    return state, StepCache(xhc, z, tanh_c, D, squeeze)


def lstm_step_backward(params: LstmLayerParams, cache: Optional[StepCache],
                       dh: np.ndarray, dc: Optional[np.ndarray] = None):
    """Backward pass of :func:`lstm_step`.

    ``dh`` and ``dc`` are the loss gradients w.r.t. the step's output hidden and
    cell state. Returns ``(grads, dx, LayerState(dh_prev, dc_prev))`` where
    ``grads`` is an :class:`LstmLayerParams` holding parameter gradients summed
    over the batch.
    """
    if cache is None:
        raise ContractError("lstm_step_backward needs the cache from lstm_step(..., return_cache=True)")
    H, D = params.hidden_size, params.input_size
    dh = _as_batch(dh, H, "dh")
    act, tc = cache.act, cache.tanh_c
    i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]

    dct = 1.0 - tc * tc
    dct *= o
    dct *= dh
    if dc is not None:
        dct += _as_batch(dc, H, "dc")

    # upstream gradient of each activated gate, then through its nonlinearity
    dz = np.empty_like(act)
    np.multiply(dct, g, out=dz[:, :H])
    np.multiply(dct, cache.c_prev, out=dz[:, H:2 * H])
    np.multiply(dct, i, out=dz[:, 2 * H:3 * H])
    np.multiply(dh, tc, out=dz[:, 3 * H:])
    deriv = act - act * act
    deriv[:, 2 * H:3 * H] = 1.0 - g * g
    dz *= deriv

    dw = cache.xhc.T @ dz
    wc = np.concatenate([dw[D + H:, :2 * H], dw[D + H:, 3 * H:]], axis=1).T
    grads = LstmLayerParams(dw[:D].T, dw[D:D + H].T, wc, dz.sum(axis=0))
    dxhc = dz @ _stacked_weights(params).T
    dx = dxhc[:, :D]
    dh_prev = dxhc[:, D:D + H]
    dc_prev = dxhc[:, D + H:]
    dc_prev += dct * f
    if cache.squeeze:
        return grads, dx[0], LayerState(dh_prev[0], dc_prev[0])
    return grads, dx, LayerState(dh_prev, dc_prev)


def dense_forward(params: DenseParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != params.weight.shape[0]:
        raise ContractError(f"dense input has length {x.shape[-1]}, expected {params.weight.shape[0]}")
    return x @ params.weight + params.bias


def dense_backward(params: DenseParams, x: np.ndarray, dy: np.ndarray):
    """Returns ``(DenseParams of gradients, dx)`` for a batched input."""
    x = np.atleast_2d(x)
    dy = np.atleast_2d(dy)
    return DenseParams(x.T @ dy, dy.sum(axis=0)), dy @ params.weight.T


# ---------------------------------------------------------------------------
# optimizers over flat parameter vectors


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "OptimizerState":
        return cls(np.zeros(n), np.zeros(n), 0)


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState,
                   hyper: OptimizerConfig) -> tuple[np.ndarray, OptimizerState]:
    """One update of the flat parameter vector. Inputs are not modified."""
    params = np.asarray(params, dtype=DTYPE)
    grads = np.asarray(grads, dtype=DTYPE)
    if params.shape != grads.shape:
        raise ContractError(f"params {params.shape} and grads {grads.shape} differ in shape")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient at parameter index {int(bad[0])}")

    if hyper.kind == "sgd":
        return params - hyper.lr * grads, OptimizerState(state.m, state.v, state.step + 1)

    t = state.step + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grads
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grads * grads
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    new = params - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new, OptimizerState(m, v, t)
