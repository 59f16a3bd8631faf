"""Column feed-forward network: forward pass, exact derivative products,
normalization, Adam, dropout, early stopping and the "FNN1" file format.

The same network is applied to every column (site), so every function
accepts either one column of shape (d,) or a batch of shape (B, d); batched
parameter gradients are summed over the batch.
"""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .fileio import MalformedFileError

log = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "tanh")


class DimensionError(ValueError):
    pass


def param_count(layer_dims) -> int:
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dimensions")
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


@dataclass
class NormStats:
    """Per-channel standardization of inputs and outputs.

    Only the first ``len(in_mean)`` input channels are standardized; any
    further input channels are extra predictors and pass through unchanged.
    """

    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def __post_init__(self):
        for name in ("in_mean", "in_std", "out_mean", "out_std"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.in_mean.shape != self.in_std.shape or self.out_mean.shape != self.out_std.shape:
            raise ValueError("mean and std shapes differ")
        if np.any(self.in_std <= 0) or np.any(self.out_std <= 0):
            raise ValueError("normalization std must be strictly positive")

    @property
    def n_norm_in(self) -> int:
        return self.in_mean.size

    @classmethod
    def identity(cls, n_norm_in: int, n_out: int) -> "NormStats":
        return cls(np.zeros(n_norm_in), np.ones(n_norm_in), np.zeros(n_out), np.ones(n_out))


def normalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    z = np.array(x, dtype=float, copy=True)
    k = stats.n_norm_in
    z[..., :k] = (z[..., :k] - stats.in_mean) / stats.in_std
    return z


def denormalize(y: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(y) * stats.out_std + stats.out_mean


@dataclass
class NetParams:
    dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...] = ()
    norm: NormStats | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        nl = len(self.dims) - 1
        if not self.activations:
            self.activations = ("tanh",) * (nl - 1) + ("identity",)
        self.activations = tuple(self.activations)
        if len(self.weights) != nl or len(self.biases) != nl or len(self.activations) != nl:
            raise DimensionError(f"{nl} layers expected from dims {self.dims}")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.dims[k], self.dims[k + 1]) or b.shape != (self.dims[k + 1],):
                raise DimensionError(f"layer {k}: weight {W.shape} / bias {b.shape} do not match dims "
                                     f"({self.dims[k]}, {self.dims[k + 1]})")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def size(self) -> int:
        return param_count(self.dims)

    def flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b]
        return np.concatenate(parts)

    def with_flat(self, vec: np.ndarray) -> "NetParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise DimensionError(f"flat vector of length {vec.size}, expected {self.size}")
        weights, biases, pos = [], [], 0
        for a, b in zip(self.dims[:-1], self.dims[1:]):
            weights.append(vec[pos:pos + a * b].reshape(a, b).copy())
            pos += a * b
            biases.append(vec[pos:pos + b].copy())
            pos += b
        return NetParams(self.dims, weights, biases, self.activations, self.norm)

    def copy(self) -> "NetParams":
        return copy.deepcopy(self)


def init_params(dims, seed=0, norm: NormStats | None = None) -> NetParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = list(dims)
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-limit, limit, size=(a, b)))
        biases.append(np.zeros(b))
    return NetParams(tuple(dims), weights, biases, norm=norm)


def zero_params(dims, norm: NormStats | None = None) -> NetParams:
    dims = list(dims)
    return NetParams(tuple(dims), [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
                     [np.zeros(b) for b in dims[1:]], norm=norm)


# ---------------------------------------------------------------------------
# forward and derivative products (normalized space)
# ---------------------------------------------------------------------------


def _as_batch(x: np.ndarray, width: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    if xb.ndim != 2 or xb.shape[1] != width:
        raise DimensionError(f"{what} has shape {x.shape}, expected last dimension {width}")
    return xb, single


def sample_dropout_mask(params: NetParams, batch: int, rate: float, rng) -> list[np.ndarray] | None:
    """Boolean keep-masks for each hidden layer."""
    if rate <= 0.0:
        return None
    return [rng.random((batch, d)) >= rate for d in params.dims[1:-1]]


def _forward_trace(params: NetParams, xb: np.ndarray, dropout_mask, rate):
    """Layer inputs and activation derivatives needed by the products."""
    inputs, derivs = [], []
    h = xb
    for k, (W, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        inputs.append(h)
        a = h @ W + b
        if act == "tanh":
            h = np.tanh(a)
            d = 1.0 - h * h
        else:
            h = a
            d = None
        if dropout_mask is not None and k < params.n_layers - 1:
            scale = dropout_mask[k] / (1.0 - rate)
            h = h * scale
            d = d * scale if d is not None else scale
        derivs.append(d)
    return h, inputs, derivs


def forward(params: NetParams, x: np.ndarray, dropout_mask=None, rate: float = 0.0) -> np.ndarray:
    """Apply the network in normalized space.

    With ``dropout_mask`` (from :func:`sample_dropout_mask`) masked hidden
    units are zeroed and survivors scaled by 1/(1 - rate).
    """
    xb, single = _as_batch(x, params.dims[0], "input")
    out = _forward_trace(params, xb, dropout_mask, rate)[0]
    return out[0] if single else out


def vjp(params: NetParams, x: np.ndarray, cotangent: np.ndarray, dropout_mask=None, rate: float = 0.0):
    """Reverse-mode products: (d<c, out>/dparams as flat vector, d<c, out>/dx)."""
    xb, single = _as_batch(x, params.dims[0], "input")
    cb, _ = _as_batch(cotangent, params.dims[-1], "cotangent")
    if cb.shape[0] != xb.shape[0]:
        raise DimensionError(f"cotangent batch {cb.shape[0]} != input batch {xb.shape[0]}")
    _, inputs, derivs = _forward_trace(params, xb, dropout_mask, rate)
    grads = [None] * (2 * params.n_layers)
    g = cb
    for k in range(params.n_layers - 1, -1, -1):
        if derivs[k] is not None:
            g = g * derivs[k]
        grads[2 * k] = (inputs[k].T @ g).ravel()
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ params.weights[k].T
    gx = g[0] if single else g
    return np.concatenate(grads), gx


def jvp(params: NetParams, x: np.ndarray, tangent_input=None, tangent_params=None,
        dropout_mask=None, rate: float = 0.0) -> np.ndarray:
    """Forward-mode directional derivative of the output."""
    xb, single = _as_batch(x, params.dims[0], "input")
    if tangent_input is None:
        dh = np.zeros_like(xb)
    else:
        dh, _ = _as_batch(tangent_input, params.dims[0], "input tangent")
        dh = np.broadcast_to(dh, xb.shape)
    dparams = None if tangent_params is None else params.with_flat(tangent_params)
    _, inputs, derivs = _forward_trace(params, xb, dropout_mask, rate)
    for k in range(params.n_layers):
        da = dh @ params.weights[k]
        if dparams is not None:
            da = da + inputs[k] @ dparams.weights[k] + dparams.biases[k]
        dh = da * derivs[k] if derivs[k] is not None else da
    return dh[0] if single else dh


# ---------------------------------------------------------------------------
# physical space: normalization composed with the network
# ---------------------------------------------------------------------------


def _norm_or_identity(params: NetParams) -> NormStats:
    return params.norm if params.norm is not None else NormStats.identity(0, params.dims[-1])


def predict(params: NetParams, x: np.ndarray) -> np.ndarray:
    """Deterministic network in physical (non-normalized) units."""
    stats = _norm_or_identity(params)
    return denormalize(forward(params, normalize(x, stats)), stats)


def _input_scale(params: NetParams, stats: NormStats) -> np.ndarray:
    scale = np.ones(params.dims[0])
    scale[: stats.n_norm_in] = 1.0 / stats.in_std
    return scale


def predict_vjp(params: NetParams, x: np.ndarray, cotangent: np.ndarray):
    """Reverse-mode products of :func:`predict` w.r.t. flat params and x."""
    stats = _norm_or_identity(params)
    gp, gz = vjp(params, normalize(x, stats), np.asarray(cotangent) * stats.out_std)
    return gp, gz * _input_scale(params, stats)


def predict_jvp(params: NetParams, x: np.ndarray, tangent_input=None, tangent_params=None) -> np.ndarray:
    stats = _norm_or_identity(params)
    dz = None if tangent_input is None else np.asarray(tangent_input) * _input_scale(params, stats)
    return jvp(params, normalize(x, stats), dz, tangent_params) * stats.out_std


# ---------------------------------------------------------------------------
# Adam and offline training
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise DimensionError("Adam state, parameters and gradients must share a shape")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, step)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 2048
    max_epochs: int = 2048
    dropout: float = 0.1
    patience: int = 128
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.learning_rate <= 0:
            raise ValueError("batch size, max epochs and learning rate must be positive")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def weighted_loss(params: NetParams, z_in, z_out, weights) -> float:
    """sum_n w_n ||z_out_n - net(z_in_n)||^2 / sum_n w_n, normalized space."""
    resid = z_out - forward(params, z_in)
    return float(np.sum(weights * np.sum(resid**2, axis=-1)) / np.sum(weights))


def weighted_loss_grad(params: NetParams, z_in, z_out, weights, dropout_mask=None, rate=0.0):
    out = forward(params, z_in, dropout_mask, rate)
    resid = z_out - out
    total = np.sum(weights)
    loss = float(np.sum(weights * np.sum(resid**2, axis=-1)) / total)
    gp, _ = vjp(params, z_in, -2.0 * weights[:, None] * resid / total, dropout_mask, rate)
    return loss, gp


def fit(params: NetParams, train: tuple, valid: tuple, cfg: TrainConfig) -> tuple[NetParams, TrainHistory]:
    """Minibatch Adam with dropout and early stopping on the validation loss.

    ``train`` and ``valid`` are (z_in, z_out, weights) in normalized space.
    The parameters of the best validation epoch (earliest on ties) are
    returned.
    """
    z_in, z_out, w = (np.asarray(a, dtype=float) for a in train)
    rng = np.random.default_rng(cfg.seed)
    flat = params.flat()
    state = AdamState.zeros(flat.size)
    history = TrainHistory()
    best_loss, best_flat, since_best = np.inf, flat.copy(), 0
    n = z_in.shape[0]
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            current = params.with_flat(flat)
            mask = sample_dropout_mask(current, idx.size, cfg.dropout, rng)
            loss, grad = weighted_loss_grad(current, z_in[idx], z_out[idx], w[idx], mask, cfg.dropout)
            flat, state = adam_step(state, flat, grad, cfg.learning_rate)
            losses.append(loss)
        vloss = weighted_loss(params.with_flat(flat), *valid)
        history.train_loss.append(float(np.mean(losses)))
        history.valid_loss.append(vloss)
        if vloss < best_loss:
            best_loss, best_flat, since_best = vloss, flat.copy(), 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                history.stopped_early = True
                log.info("early stop at epoch %d, restoring epoch %d", epoch, history.best_epoch)
                break
    return params.with_flat(best_flat), history


# ---------------------------------------------------------------------------
# FNN1 serialization
# ---------------------------------------------------------------------------

FNN_MAGIC = b"FNN1"
FNN_VERSION = 1


def serialize(params: NetParams) -> bytes:
    """Layout: magic, u32 version, u32 layer count, u32 dims, u8 activation
    tags, then per layer u32 rows, u32 cols, weights (row-major), biases,
    then u8 norm flag and, if set, u32 n_in, in mean/std, u32 n_out, out
    mean/std. All integers and 8-byte floats little-endian."""
    nl = params.n_layers
    out = [FNN_MAGIC, struct.pack("<II", FNN_VERSION, nl), struct.pack(f"<{nl + 1}I", *params.dims),
           bytes(ACTIVATIONS.index(a) for a in params.activations)]
    for W, b in zip(params.weights, params.biases):
        out.append(struct.pack("<II", *W.shape))
        out.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    if params.norm is None:
        out.append(b"\x00")
    else:
        s = params.norm
        out += [b"\x01", struct.pack("<I", s.in_mean.size), s.in_mean.astype("<f8").tobytes(),
                s.in_std.astype("<f8").tobytes(), struct.pack("<I", s.out_mean.size),
                s.out_mean.astype("<f8").tobytes(), s.out_std.astype("<f8").tobytes()]
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedFileError(f"truncated while reading {what}", len(self.data))
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int, what: str) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count, what))

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(float)


def deserialize(data: bytes) -> NetParams:
    r = _Reader(data)
    if r.take(4, "magic") != FNN_MAGIC:
        raise MalformedFileError("bad magic", 0)
    version, nl = r.u32(2, "header")
    if version != FNN_VERSION:
        raise MalformedFileError(f"unsupported version {version}", 4)
    if nl < 1:
        raise MalformedFileError("layer count must be positive", 8)
    dims = r.u32(nl + 1, "dims")
    tags = r.take(nl, "activation tags")
    if any(t >= len(ACTIVATIONS) for t in tags):
        raise MalformedFileError("unknown activation tag", r.pos - nl)
    weights, biases = [], []
    for k in range(nl):
        at = r.pos
        rows, cols = r.u32(2, f"layer {k} shape")
        if (rows, cols) != (dims[k], dims[k + 1]):
            raise MalformedFileError(f"layer {k}: declared shape ({rows}, {cols}) does not match dims "
                                     f"({dims[k]}, {dims[k + 1]})", at)
        weights.append(r.floats(rows * cols, f"layer {k} weights").reshape(rows, cols))
        biases.append(r.floats(cols, f"layer {k} biases"))
    norm = None
    if r.take(1, "norm flag") == b"\x01":
        (n_in,) = r.u32(1, "input norm size")
        in_mean, in_std = r.floats(n_in, "input means"), r.floats(n_in, "input stds")
        (n_out,) = r.u32(1, "output norm size")
        out_mean, out_std = r.floats(n_out, "output means"), r.floats(n_out, "output stds")
        try:
            norm = NormStats(in_mean, in_std, out_mean, out_std)
        except ValueError as exc:
            raise MalformedFileError(str(exc), r.pos) from None
    if r.pos != len(data):
        raise MalformedFileError(f"{len(data) - r.pos} trailing bytes", r.pos)
    return NetParams(dims, weights, biases, tuple(ACTIVATIONS[t] for t in tags), norm)


def save_params(path, params: NetParams) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(params))


def load_params(path) -> NetParams:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
