"""Differentiable building blocks: ConvLSTM1D, LSTM/BiLSTM, batch and layer
normalisation, dense layers, multi-head attention and the encoder block.

Recurrent layers run time-major, ``(time, batch, space, channels)``, so each
step reads a contiguous slab.  Their sequence forward is a single fused tape
op (see :func:`recurrence`) whose backward is explicit BPTT over the compiled
cell kernels; the per-step methods build the same cell out of primitives and
serve as the reference path.
"""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import ShapeError, Tensor

GATES = ("i", "f", "o", "g")


class Module:
    """Minimal parameter container with ordered, hierarchical names."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._modules: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.ascontiguousarray(value, dtype=T.get_default_dtype()), requires_grad=True, name=name)
        self._params[name] = t
        setattr(self, name, t)
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=T.get_default_dtype())

    def add_module(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for mname, m in self._modules.items():
            yield from m.named_parameters(prefix + mname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for mname, m in self._modules.items():
            yield from m.named_buffers(prefix + mname + ".")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        mod = self
        *path, leaf = dotted.split(".")
        for part in path:
            mod = mod._modules[part]
        if leaf not in mod._buffers:
            raise KeyError(dotted)
        mod._buffers[leaf] = np.asarray(value, dtype=mod._buffers[leaf].dtype)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _stack_gates(rng, per_gate_shape, fan_in, fan_out) -> np.ndarray:
    """Four independently initialised gate blocks concatenated on the last axis."""
    return np.concatenate([glorot(rng, per_gate_shape, fan_in, fan_out) for _ in GATES], axis=-1)


def _gate_bias(units: int) -> np.ndarray:
    b = np.zeros(4 * units)
    b[units:2 * units] = 1.0  # forget gate
    return b


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, activation: str | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if activation not in (None, "linear", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.activation = None if activation == "linear" else activation
        self.add_param("w", glorot(rng, (in_features, out_features), in_features, out_features))
        self.add_param("b", np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Dense expects last dim {self.in_features}, got {x.shape}")
        if x.ndim == 1:
            y = T.reshape(T.matmul(T.reshape(x, (1, -1)), self.w), (self.out_features,)) + self.b
        else:
            y = T.matmul(x, self.w) + self.b
        return T.relu(y) if self.activation == "relu" else y


# ---------------------------------------------------------------------------
# fused recurrence
# ---------------------------------------------------------------------------

def _same_pad(kernel: int) -> tuple[int, int]:
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def _cols_same(h: np.ndarray, kernel: int) -> np.ndarray:
    """(B, S, F) -> (B*S, kernel*F) zero-padded 'same' patches."""
    b, s, f = h.shape
    if kernel == 1:
        return h.reshape(b * s, f)
    left, right = _same_pad(kernel)
    hp = np.zeros((b, s + kernel - 1, f), dtype=h.dtype)
    hp[:, left:left + s] = h
    return np.concatenate([hp[:, j:j + s] for j in range(kernel)], axis=-1).reshape(b * s, kernel * f)


def _col2im_same(gcols: np.ndarray, b: int, s: int, f: int, kernel: int) -> np.ndarray:
    if kernel == 1:
        return gcols.reshape(b, s, f)
    left, _ = _same_pad(kernel)
    g = gcols.reshape(b, s, kernel, f)
    out = np.zeros((b, s + kernel - 1, f), dtype=gcols.dtype)
    for j in range(kernel):
        out[:, j:j + s] += g[:, :, j]
    return out[:, left:left + s]


def recurrence(zx: Tensor, w_h: Tensor, peep: Tensor | None = None, reverse: bool = False) -> Tensor:
    """Run the peephole LSTM cell over time as one taped op.

    ``zx``: (T, B, S, 4, F) input contributions (input conv + bias) for every step.
    ``w_h``: (k, F, 4F) state-to-state kernel, applied with stride 1 and
    'same' zero padding so the state keeps its spatial length (k=1, S=1 is a
    plain LSTM).  ``peep``: (3, S, F) per-cell peephole weights or ``None``.
    Returns the hidden sequence (T, B, S, F), indexed by original time even
    when ``reverse`` is set.  Initial state is zero.
    """
    if zx.ndim != 5 or zx.shape[3] != 4:
        raise ShapeError(f"recurrence expects zx of shape (T, B, S, 4, F), got {zx.shape}")
    steps, batch, space, _, feat = zx.shape
    kernel = w_h.shape[0]
    if w_h.shape != (kernel, feat, 4 * feat):
        raise ShapeError(f"state kernel {w_h.shape} does not match {feat} features")
    if peep is not None and peep.shape != (3, space, feat):
        raise ShapeError(f"peephole weights {peep.shape} != {(3, space, feat)}")
    dtype = zx.dtype
    kern = kernels.get_backend()
    zxd = np.ascontiguousarray(zx.data)
    wmat = np.ascontiguousarray(w_h.data.reshape(kernel * feat, 4 * feat), dtype=dtype)
    pd = None if peep is None else np.ascontiguousarray(peep.data, dtype=dtype)

    gates = np.empty((steps, batch, space, 4, feat), dtype=dtype)
    cells = np.empty((steps, batch, space, feat), dtype=dtype)
    tanh_c = np.empty_like(cells)
    hidden = np.empty_like(cells)
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    zeros = np.zeros((batch, space, feat), dtype=dtype)

    h, c = zeros, zeros
    for t in order:
        z = zxd[t] + (_cols_same(h, kernel) @ wmat).reshape(batch, space, 4, feat)
        kern.cell_forward(z, c, pd, gates[t], cells[t], tanh_c[t], hidden[t])
        h, c = hidden[t], cells[t]

    def bw(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        dzx = np.empty_like(zxd)
        dw = np.zeros_like(wmat)
        dpeep = None if pd is None else np.zeros_like(pd)
        dh_carry = np.zeros_like(zeros)
        dc_carry = np.zeros_like(zeros)
        dc_prev = np.empty_like(zeros)
        seq = list(order)
        for pos in range(steps - 1, -1, -1):
            t = seq[pos]
            prev = seq[pos - 1] if pos > 0 else None
            c_prev = cells[prev] if prev is not None else zeros
            dh = g[t] + dh_carry
            kern.cell_backward(dh, dc_carry, gates[t], c_prev, cells[t], tanh_c[t],
                               pd, dzx[t], dc_prev, dpeep)
            dz2 = dzx[t].reshape(batch * space, 4 * feat)
            if prev is not None:
                dw += _cols_same(hidden[prev], kernel).T @ dz2
                dh_carry = _col2im_same(dz2 @ wmat.T, batch, space, feat, kernel)
            dc_carry, dc_prev = dc_prev, dc_carry
        return dzx, dw.reshape(w_h.shape), dpeep

    inputs = (zx, w_h) if peep is None else (zx, w_h, peep)
    return T.make_op(hidden, inputs, bw, "recurrence")


# ---------------------------------------------------------------------------
# recurrent layers
# ---------------------------------------------------------------------------

class ConvLSTM1D(Module):
    """1-D ConvLSTM with per-cell peepholes.

    Input-to-state: valid convolution with ``kernel``/``stride`` along space.
    State-to-state: stride-1 'same' convolution so h and c keep length
    ``floor((L - kernel) / stride) + 1``.  The output gate's peephole reads
    the updated cell state.
    """

    def __init__(self, in_len: int, in_channels: int, filters: int, kernel: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_len, self.in_channels = in_len, in_channels
        self.filters, self.kernel, self.stride = filters, kernel, stride
        self.out_len = T.conv_out_len(in_len, kernel, stride)
        if self.out_len < 1:
            raise ShapeError(f"ConvLSTM1D: input length {in_len} shorter than kernel {kernel}")
        f = filters
        self.add_param("w_x", _stack_gates(rng, (kernel, in_channels, f), kernel * in_channels, kernel * f))
        self.add_param("w_h", _stack_gates(rng, (kernel, f, f), kernel * f, kernel * f))
        self.add_param("peep", np.zeros((3, self.out_len, f)))
        self.add_param("b", _gate_bias(f))

    def _check(self, x: Tensor) -> None:
        if x.shape[-2:] != (self.in_len, self.in_channels):
            raise ShapeError(f"ConvLSTM1D expects (..., {self.in_len}, {self.in_channels}), got {x.shape}")

    def initial_state(self, batch: int):
        z = T.zeros((batch, self.out_len, self.filters))
        return z, z

    def step(self, x_t: Tensor, state):
        """One time step from primitives. ``x_t``: (B, L, C); state: (h, c) each (B, S, F)."""
        self._check(x_t)
        h, c = state
        f = self.filters
        if h.shape[1:] != (self.out_len, f) or c.shape != h.shape:
            raise ShapeError(f"state shape {h.shape}/{c.shape} != (B, {self.out_len}, {f})")
        left, right = _same_pad(self.kernel)
        z = (T.conv1d_valid(x_t, self.w_x, self.stride)
             + T.conv1d_valid(T.pad(h, (left, right), axis=1), self.w_h, 1)
             + self.b)
        zi, zf, zo, zg = (z[..., k * f:(k + 1) * f] for k in range(4))
        shape = c.shape
        i = T.sigmoid(zi + T.broadcast_to(self.peep[0], shape) * c)
        fg = T.sigmoid(zf + T.broadcast_to(self.peep[1], shape) * c)
        g = T.tanh(zg)
        c_new = fg * c + i * g
        o = T.sigmoid(zo + T.broadcast_to(self.peep[2], shape) * c_new)
        h_new = o * T.tanh(c_new)
        return h_new, c_new

    def forward(self, seq: Tensor) -> Tensor:
        """(T, B, L, C) -> (T, B, S, F); an unbatched (T, L, C) input is accepted."""
        if seq.ndim == 3:
            return T.reshape(self.forward(T.reshape(seq, (seq.shape[0], 1) + seq.shape[1:])),
                             (seq.shape[0], self.out_len, self.filters))
        self._check(seq)
        steps, batch = seq.shape[:2]
        if steps < 1:
            raise ShapeError("ConvLSTM1D needs at least one time step")
        f = self.filters
        flat = T.reshape(seq, (steps * batch, self.in_len, self.in_channels))
        zx = T.conv1d_valid(flat, self.w_x, self.stride) + self.b
        zx = T.reshape(zx, (steps, batch, self.out_len, 4, f))
        return recurrence(zx, self.w_h, self.peep)


class LSTM(Module):
    """Plain (non-peephole) LSTM over a time-major (T, B, D) sequence."""

    def __init__(self, in_features: int, units: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features, self.units = in_features, units
        self.add_param("w_x", _stack_gates(rng, (in_features, units), in_features, units))
        self.add_param("w_h", _stack_gates(rng, (units, units), units, units))
        self.add_param("b", _gate_bias(units))

    def step(self, x_t: Tensor, state):
        h, c = state
        u = self.units
        z = T.matmul(x_t, self.w_x) + T.matmul(h, self.w_h) + self.b
        i, f, o = (T.sigmoid(z[..., k * u:(k + 1) * u]) for k in range(3))
        g = T.tanh(z[..., 3 * u:])
        c_new = f * c + i * g
        return o * T.tanh(c_new), c_new

    def forward(self, seq: Tensor, reverse: bool = False) -> Tensor:
        """(T, B, D) -> hidden sequence (T, B, U)."""
        if seq.ndim != 3 or seq.shape[-1] != self.in_features:
            raise ShapeError(f"LSTM expects (T, B, {self.in_features}), got {seq.shape}")
        steps, batch, _ = seq.shape
        if steps < 1:
            raise ShapeError("LSTM needs at least one time step")
        u = self.units
        zx = T.reshape(T.matmul(seq, self.w_x) + self.b, (steps, batch, 1, 4, u))
        h = recurrence(zx, T.reshape(self.w_h, (1, u, 4 * u)), None, reverse=reverse)
        return T.reshape(h, (steps, batch, u))


class BiLSTM(Module):
    """Forward and backward LSTMs; output is both directions' final hidden state."""

    def __init__(self, in_features: int, units: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.units = units
        self.add_module("fwd", LSTM(in_features, units, rng))
        self.add_module("bwd", LSTM(in_features, units, rng))

    @property
    def out_features(self) -> int:
        return 2 * self.units

    def forward(self, seq: Tensor) -> Tensor:
        """(T, B, D) -> (B, 2U); an unbatched (T, D) input gives (2U,)."""
        if seq.ndim == 2:
            out = self.forward(T.reshape(seq, (seq.shape[0], 1, seq.shape[1])))
            return T.reshape(out, (self.out_features,))
        hf = self.fwd(seq)
        hb = self.bwd(seq, reverse=True)
        return T.concat([hf[seq.shape[0] - 1], hb[0]], axis=-1)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Training-mode batch norm over every axis but the last (fused op).

    Returns the output tensor and the batch (mean, variance) arrays.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch norm params {gamma.shape} do not match channels {c}")
    xd = x.data.reshape(-1, c)
    n = xd.shape[0]
    mu = xd.mean(axis=0)
    xc = xd - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def bw(g):
        g2 = g.reshape(-1, c)
        dbeta = g2.sum(axis=0)
        dgamma = (g2 * xhat).sum(axis=0)
        dxhat = g2 * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx.reshape(x.shape), dgamma, dbeta
    return T.make_op(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "batch_norm"), mu, var


class BatchNorm(Module):
    """Per-channel (last axis) batch normalisation with running statistics."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.add_buffer("running_mean", np.zeros(channels))
        self.add_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor, training: bool | None = None) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"BatchNorm expects {self.channels} channels, got {x.shape}")
        training = self.training if training is None else training
        if training:
            out, mu, var = batch_norm(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            dt = self._buffers["running_mean"].dtype
            self._buffers["running_mean"] = (m * self._buffers["running_mean"] + (1 - m) * mu).astype(dt)
            self._buffers["running_var"] = (m * self._buffers["running_var"] + (1 - m) * var).astype(dt)
            return out
        return self._affine_inference(x)

    def _affine_inference(self, x: Tensor) -> Tensor:
        rm = Tensor(self._buffers["running_mean"].astype(x.dtype))
        rs = Tensor((1.0 / np.sqrt(self._buffers["running_var"] + self.eps)).astype(x.dtype))
        return (x - rm) * rs * self.gamma + self.beta


class LayerNorm(Module):
    """Normalise across the last axis: subtract the mean, divide by the
    population standard deviation (eps inside the root), then gain and bias."""

    def __init__(self, width: int, eps: float = 1e-6):
        super().__init__()
        self.width, self.eps = width, eps
        self.add_param("g", np.ones(width))
        self.add_param("b", np.zeros(width))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b, self.eps)


def layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-6) -> Tensor:
    if x.shape[-1] != g.shape[0]:
        raise ShapeError(f"LayerNorm width {g.shape[0]} != input {x.shape}")
    mu = T.broadcast_to(T.mean(x, axis=-1, keepdims=True), x.shape)
    xc = x - mu
    var = T.mean(T.square(xc), axis=-1, keepdims=True)
    sigma = T.broadcast_to(T.sqrt(var + eps), x.shape)
    return xc / sigma * g + b


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes (batched)."""
    if q.shape[-2] == 0 or k.shape[-2] == 0:
        raise ShapeError("attention needs at least one token")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shapes Q{q.shape} K{k.shape} V{v.shape} incompatible")
    nd = k.ndim
    kt = T.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = T.matmul(q, kt) * (1.0 / math.sqrt(q.shape[-1]))
    return T.matmul(T.softmax(scores, axis=-1), v)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


class MultiHeadAttention(Module):
    """H heads of width d_k, each with its own Q/K/V projections, then W^O."""

    def __init__(self, d_model: int, heads: int = 8, head_dim: int = 64, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.d_model, self.heads, self.head_dim = d_model, heads, head_dim
        inner = heads * head_dim
        for name in ("w_q", "w_k", "w_v"):
            self.add_param(name, glorot(rng, (d_model, inner), d_model, inner))
        self.add_param("w_o", glorot(rng, (inner, d_model), inner, d_model))

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.transpose(T.reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return T.reshape(self.forward(T.reshape(x, (1,) + x.shape)), x.shape)
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise ShapeError(f"MultiHeadAttention expects (B, N, {self.d_model}), got {x.shape}")
        b, n, _ = x.shape
        q = self._split(T.matmul(x, self.w_q))
        k = self._split(T.matmul(x, self.w_k))
        v = self._split(T.matmul(x, self.w_v))
        heads = attention(q, k, v)
        merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, n, self.heads * self.head_dim))
        return T.matmul(merged, self.w_o)


class EncoderBlock(Module):
    """Post-norm encoder block without a leading LayerNorm:
    ``h = LN(x + MHA(x)); out = LN(h + MLP(h))``."""

    def __init__(self, d_model: int, heads: int = 8, head_dim: int = 64, ff_units: int = 128,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.d_model = d_model
        self.add_module("mha", MultiHeadAttention(d_model, heads, head_dim, rng))
        self.add_module("ln1", LayerNorm(d_model))
        self.add_module("ff1", Dense(d_model, ff_units, "relu", rng))
        self.add_module("ff2", Dense(ff_units, d_model, None, rng))
        self.add_module("ln2", LayerNorm(d_model))

    def forward(self, x: Tensor) -> Tensor:
        h = self.ln1(x + self.mha(x))
        return self.ln2(h + self.ff2(self.ff1(h)))


def sinusoidal_positions(tokens: int, width: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(tokens)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)
