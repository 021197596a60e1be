"""Parameterized layers: fully-connected maps, conv blocks, and LSTM runners.

Two sequence runners are provided. ``rnn_run_plain`` unrolls the cell once,
left to right, from zero state. ``rnn_run_circle`` feeds the last step's
output back into the first step by unrolling the cell over the input stream
tiled ``depth`` times and returning the hidden states of the final pass, so
every step has an equally long history and the first step no longer sees a
null hidden input.

The runners share one fused tape node (`lstm_sequence`) whose backward is a
hand-written backpropagation-through-time sweep; a step-by-step composition
(`lstm_step`) built from the engine's primitives serves as its oracle in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class FCParams:
    """Affine map y = weight @ x + bias; weight is (out_dim, in_dim)."""

    weight: Tensor
    bias: Tensor

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ConvBlockParams:
    """One convolution layer: kernels (K,C,kh,kw), per-kernel bias, geometry."""

    kernels: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0


@dataclass
class LSTMCellParams:
    """The eight weight matrices and four biases of one LSTM cell.

    Input-to-gate matrices are (hidden_dim, input_dim), hidden-to-gate
    matrices (hidden_dim, hidden_dim), biases (hidden_dim,).
    """

    W_xi: Tensor
    W_xf: Tensor
    W_xo: Tensor
    W_xc: Tensor
    W_hi: Tensor
    W_hf: Tensor
    W_ho: Tensor
    W_hc: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.W_xi.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_xi.shape[1]

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.W_xi, self.W_xf, self.W_xo, self.W_xc,
                self.W_hi, self.W_hf, self.W_ho, self.W_hc,
                self.b_i, self.b_f, self.b_o, self.b_c)

    def validate(self) -> None:
        h, d = self.W_xi.shape
        for name in ("W_xi", "W_xf", "W_xo", "W_xc"):
            if getattr(self, name).shape != (h, d):
                raise ShapeError(f"{name}: expected {(h, d)}, got {getattr(self, name).shape}")
        for name in ("W_hi", "W_hf", "W_ho", "W_hc"):
            if getattr(self, name).shape != (h, h):
                raise ShapeError(f"{name}: expected {(h, h)}, got {getattr(self, name).shape}")
        for name in ("b_i", "b_f", "b_o", "b_c"):
            if getattr(self, name).shape != (h,):
                raise ShapeError(f"{name}: expected {(h,)}, got {getattr(self, name).shape}")


@dataclass
class CircleConfig:
    """Number of complete passes the circular recurrence makes over the sequence."""

    depth: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"circle depth must be >= 1, got {self.depth}")


def fc_forward(p: FCParams, x: Tensor) -> Tensor:
    """Apply the affine map to one vector or to a batch of row vectors."""
    if x.data.ndim == 1:
        if x.shape[0] != p.in_dim:
            raise ShapeError(f"fc_forward: input length {x.shape[0]} != in_dim {p.in_dim}")
        y = ad.matmul(ad.reshape(x, (1, p.in_dim)), ad.transpose2d(p.weight))
        return ad.reshape(ad.add(y, p.bias), (p.out_dim,))
    if x.data.ndim == 2:
        if x.shape[1] != p.in_dim:
            raise ShapeError(f"fc_forward: row length {x.shape[1]} != in_dim {p.in_dim}")
        return ad.add(ad.matmul(x, ad.transpose2d(p.weight)), p.bias)
    raise ShapeError(f"fc_forward: expects vector or matrix, got {x.shape}")


def lstm_step(p: LSTMCellParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One LSTM update, composed from engine primitives.

    Accepts vectors or (batch, dim) matrices. Returns (h_t, c_t).
    Gate order: input, forget, output gates then the tanh candidate; the cell
    update is f*c_prev + i*g and the output o*tanh(c).
    """
    vec = x_t.data.ndim == 1
    if vec:
        x_t = ad.reshape(x_t, (1, x_t.shape[0]))
        h_prev = ad.reshape(h_prev, (1, h_prev.shape[0]))
        c_prev = ad.reshape(c_prev, (1, c_prev.shape[0]))
    if x_t.shape[1] != p.input_dim or h_prev.shape[1] != p.hidden_dim:
        raise ShapeError(
            f"lstm_step: x {x_t.shape}, h {h_prev.shape} vs cell ({p.hidden_dim}, {p.input_dim})")

    def gate(wx, wh, b, squash):
        z = ad.add(ad.add(ad.matmul(x_t, ad.transpose2d(wx)),
                          ad.matmul(h_prev, ad.transpose2d(wh))), b)
        return ad.activation(z, squash)

    i = gate(p.W_xi, p.W_hi, p.b_i, "sigmoid")
    f = gate(p.W_xf, p.W_hf, p.b_f, "sigmoid")
    o = gate(p.W_xo, p.W_ho, p.b_o, "sigmoid")
    g = gate(p.W_xc, p.W_hc, p.b_c, "tanh")
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    if vec:
        h = ad.reshape(h, (h.shape[1],))
        c = ad.reshape(c, (c.shape[1],))
    return h, c


def lstm_sequence(p: LSTMCellParams, xs: Tensor) -> Tensor:
    """Unroll the cell over a (T, B, D) stream from zero state; one tape node.

    Returns all hidden states (T, B, H). The backward rule is a manual BPTT
    sweep over the stored per-step gate activations.
    """
    p.validate()
    if xs.data.ndim != 3:
        raise ShapeError(f"lstm_sequence: expects (T, B, D) stream, got {xs.shape}")
    t_total, batch, d = xs.shape
    if t_total < 1:
        raise ShapeError("lstm_sequence: empty input sequence")
    if d != p.input_dim:
        raise ShapeError(f"lstm_sequence: stream dim {d} != cell input_dim {p.input_dim}")
    hd = p.hidden_dim
    wx = np.concatenate([p.W_xi.data, p.W_xf.data, p.W_xo.data, p.W_xc.data], axis=0)
    wh = np.concatenate([p.W_hi.data, p.W_hf.data, p.W_ho.data, p.W_hc.data], axis=0)
    b = np.concatenate([p.b_i.data, p.b_f.data, p.b_o.data, p.b_c.data])

    xd = xs.data
    hs = np.empty((t_total, batch, hd))
    cs = np.empty((t_total, batch, hd))
    gates = np.empty((t_total, batch, 4 * hd))
    tanh_c = np.empty((t_total, batch, hd))
    # single big input projection, then the sequential part
    zx = xd.reshape(t_total * batch, d) @ wx.T + b
    zx = zx.reshape(t_total, batch, 4 * hd)
    h = np.zeros((batch, hd))
    c = np.zeros((batch, hd))
    for t in range(t_total):
        z = zx[t] + h @ wh.T
        ifo = expit(z[:, :3 * hd])
        g = np.tanh(z[:, 3 * hd:])
        i, f, o = ifo[:, :hd], ifo[:, hd:2 * hd], ifo[:, 2 * hd:]
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates[t, :, :3 * hd] = ifo
        gates[t, :, 3 * hd:] = g
        cs[t] = c
        tanh_c[t] = tc
        hs[t] = h
    out = Tensor(hs)

    def bw(dout):
        dz = np.empty((t_total, batch, 4 * hd))
        dh_next = np.zeros((batch, hd))
        dc_next = np.zeros((batch, hd))
        dwh = np.zeros_like(wh)
        for t in range(t_total - 1, -1, -1):
            i = gates[t, :, :hd]
            f = gates[t, :, hd:2 * hd]
            o = gates[t, :, 2 * hd:3 * hd]
            g = gates[t, :, 3 * hd:]
            tc = tanh_c[t]
            c_prev = cs[t - 1] if t > 0 else np.zeros((batch, hd))
            h_prev = hs[t - 1] if t > 0 else np.zeros((batch, hd))
            dh = dout[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dzt = dz[t]
            dzt[:, :hd] = dc * g * i * (1.0 - i)
            dzt[:, hd:2 * hd] = dc * c_prev * f * (1.0 - f)
            dzt[:, 2 * hd:3 * hd] = dh * tc * o * (1.0 - o)
            dzt[:, 3 * hd:] = dc * i * (1.0 - g * g)
            dc_next = dc * f
            dh_next = dzt @ wh
            if t > 0:
                dwh += dzt.T @ h_prev
        dz2 = dz.reshape(t_total * batch, 4 * hd)
        dwx = dz2.T @ xd.reshape(t_total * batch, d)
        db = dz2.sum(axis=0)
        dxs = (dz2 @ wx).reshape(t_total, batch, d)
        s = [slice(k * hd, (k + 1) * hd) for k in range(4)]
        return (dxs,
                dwx[s[0]], dwx[s[1]], dwx[s[2]], dwx[s[3]],
                dwh[s[0]], dwh[s[1]], dwh[s[2]], dwh[s[3]],
                db[s[0]], db[s[1]], db[s[2]], db[s[3]])

    return ad.record_op(out, (xs,) + p.tensors(), bw)


def _as_stream(inputs) -> tuple[Tensor, bool]:
    """Accept a (T,B,D) tensor or a non-empty list of (D,) vectors."""
    if isinstance(inputs, Tensor):
        return inputs, False
    if not inputs:
        raise ShapeError("sequence runner: empty input sequence")
    dims = {v.shape for v in inputs}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ShapeError(f"sequence runner: inputs must be uniform vectors, got {sorted(dims)}")
    rows = [ad.reshape(v, (1, 1, v.shape[0])) for v in inputs]
    return ad.concat_rows(rows), True


def rnn_run_plain(p: LSTMCellParams, inputs):
    """Run the cell left to right from zero hidden/cell state.

    ``inputs`` is a list of T vectors (returns a list of T hidden vectors)
    or a (T,B,D) tensor (returns (T,B,H)).
    """
    stream, as_list = _as_stream(inputs)
    hs = lstm_sequence(p, stream)
    if not as_list:
        return hs
    return [ad.reshape(ad.slice_row(hs, t), (p.hidden_dim,)) for t in range(stream.shape[0])]


def rnn_run_circle(p: LSTMCellParams, inputs, cfg: CircleConfig):
    """Circular recurrence: the stream is tiled cfg.depth times and the
    hidden states of the final pass are returned, so step 1 of each pass
    after the first receives the previous pass's last hidden state."""
    stream, as_list = _as_stream(inputs)
    t = stream.shape[0]
    tiled = ad.concat_rows([stream] * cfg.depth) if cfg.depth > 1 else stream
    hs_all = lstm_sequence(p, tiled)
    hs = ad.slice_rows(hs_all, (cfg.depth - 1) * t, cfg.depth * t) if cfg.depth > 1 else hs_all
    if not as_list:
        return hs
    return [ad.reshape(ad.slice_row(hs, k), (p.hidden_dim,)) for k in range(t)]


# ---------------------------------------------------------------------------
# initialization


def _uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_fc(rng: np.random.Generator, out_dim: int, in_dim: int) -> FCParams:
    return FCParams(weight=_uniform_fan_in(rng, (out_dim, in_dim), in_dim),
                    bias=Tensor(np.zeros(out_dim), requires_grad=True))


def init_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int,
              stride: int = 1, pad: int = 0) -> ConvBlockParams:
    fan_in = in_ch * k * k
    return ConvBlockParams(kernels=_uniform_fan_in(rng, (out_ch, in_ch, k, k), fan_in),
                           bias=Tensor(np.zeros(out_ch), requires_grad=True),
                           stride=stride, pad=pad)


def init_lstm(rng: np.random.Generator, hidden_dim: int, input_dim: int) -> LSTMCellParams:
    """Fan-in-scaled uniform weights; forget-gate bias starts at 1.0."""
    def wx():
        return _uniform_fan_in(rng, (hidden_dim, input_dim), input_dim)

    def wh():
        return _uniform_fan_in(rng, (hidden_dim, hidden_dim), hidden_dim)

    def bias(value=0.0):
        return Tensor(np.full(hidden_dim, value, dtype=np.float64), requires_grad=True)

    return LSTMCellParams(W_xi=wx(), W_xf=wx(), W_xo=wx(), W_xc=wx(),
                          W_hi=wh(), W_hf=wh(), W_ho=wh(), W_hc=wh(),
                          b_i=bias(), b_f=bias(1.0), b_o=bias(), b_c=bias())
