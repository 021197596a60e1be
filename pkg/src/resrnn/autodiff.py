"""Dense-tensor reverse-mode autodiff engine.

Small define-by-run engine on float64 numpy arrays. Every differentiable
operation appends a node to the active :class:`Tape`; ``backward`` replays
the tape in reverse, accumulating gradients additively. Covers exactly what
a conv + gated-recurrence regressor needs: matmul, 2-d convolution, 2x2 max
pooling, elementwise arithmetic, the three standard activations and pure
data-movement ops.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class Tensor:
    """N-dimensional float64 array participating in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    # operator sugar; ops defined below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    """One executed op: output, inputs, and the rule mapping d(output) to d(inputs)."""

    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward_fn):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward().

    Single-writer: each worker/iteration owns its tape. Use as a context
    manager; ops executed inside record themselves here.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


_tape_stack: list[Tape] = []


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def record_op(output: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Register a custom op on the active tape.

    ``backward_fn(dout)`` must return one gradient array (or None) per input,
    in order. Recording is skipped when no tape is active or no input needs
    gradients; the output then simply carries requires_grad=False.
    """
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    if tape is not None and needs:
        output.requires_grad = True
        tape.record(_Node(output, inputs, backward_fn))
    return output


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate .grad of every requires_grad tensor reachable from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("backward() called with no active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned = {id(loss)}  # keys whose arrays we may mutate in place
    for node in reversed(tape.nodes):
        dout = grads.pop(id(node.output), None)
        if dout is None:
            continue
        owned.discard(id(node.output))
        if node.output.requires_grad:
            if node.output.grad is None:
                node.output.grad = dout
            else:
                node.output.grad = node.output.grad + dout
        for t, g in zip(node.inputs, node.backward_fn(dout)):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in grads:
                grads[key] = g  # stored by reference; copied on first accumulation
            elif key in owned:
                grads[key] += g
            else:
                grads[key] = grads[key] + g
                owned.add(key)
    # leaves (parameters, inputs) never appear as node outputs, so their
    # gradients are still pending in the dict; flush them now
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) in grads:
                t.accumulate_grad(grads.pop(id(t)))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may be a vector broadcast over leading axes (bias)."""
    if a.shape == b.shape:
        out = Tensor(a.data + b.data)
        return record_op(out, (a, b), lambda d: (d, d))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        out = Tensor(a.data + b.data)
        axes = tuple(range(a.data.ndim - 1))
        return record_op(out, (a, b), lambda d: (d, d.sum(axis=axes)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} incompatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return record_op(out, (a, b), lambda d: (d, -d))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return record_op(out, (a, b), lambda d: (d * b.data, d * a.data))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"elementwise: unknown kind {kind!r}")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    return record_op(out, (a,), lambda d: (d * s,))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(a.data.sum())
    return record_op(out, (a,), lambda d: (np.broadcast_to(d, a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return record_op(out, (a, b), lambda d: (d @ b.data.T, a.data.T @ d))


# ---------------------------------------------------------------------------
# activations


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        y = np.maximum(a.data, 0.0)
        out = Tensor(y)
        mask = a.data > 0.0
        return record_op(out, (a,), lambda d: (d * mask,))
    if kind == "sigmoid":
        y = expit(a.data)
        out = Tensor(y)
        return record_op(out, (a,), lambda d: (d * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(a.data)
        out = Tensor(y)
        return record_op(out, (a,), lambda d: (d * (1.0 - y * y),))
    raise ValueError(f"activation: unknown kind {kind!r}")


def relu(a: Tensor) -> Tensor:
    return activation(a, "relu")


def sigmoid(a: Tensor) -> Tensor:
    return activation(a, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    return activation(a, "tanh")


# ---------------------------------------------------------------------------
# data movement


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: {a.shape} -> {shape} changes element count")
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    return record_op(out, (a,), lambda d: (d.reshape(old),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for ndim {a.data.ndim}")
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return record_op(out, (a,), lambda d: (d.transpose(inv),))


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d: expects a matrix, got {a.shape}")
    return permute(a, (1, 0))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; backward splits the gradient back."""
    if not parts:
        raise ShapeError("concat_rows: empty input")
    tails = {p.shape[1:] for p in parts}
    if len(tails) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ: {sorted(tails)}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(d):
        return tuple(d[bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    return record_op(out, tuple(parts), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[0]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for axis 0 extent {n}")
    out = Tensor(a.data[start:stop].copy())

    def bw(d):
        g = np.zeros_like(a.data)
        g[start:stop] = d
        return (g,)

    return record_op(out, (a,), bw)


def slice_row(a: Tensor, index: int) -> Tensor:
    if not (0 <= index < a.shape[0]):
        raise ShapeError(f"slice_row: index {index} out of range for extent {a.shape[0]}")
    out = Tensor(a.data[index].copy())

    def bw(d):
        g = np.zeros_like(a.data)
        g[index] = d
        return (g,)

    return record_op(out, (a,), bw)


def restructure(a, kind: str, **kw):
    """Dispatch for pure data-movement ops, keyed by name."""
    if kind == "reshape":
        return reshape(a, kw["shape"])
    if kind == "transpose2d":
        return transpose2d(a)
    if kind == "concat_rows":
        return concat_rows(a)
    if kind == "slice_row":
        return slice_row(a, kw["index"])
    raise ValueError(f"restructure: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# convolution / pooling


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*kh*kw, ho*wo) patch stack (natural layout, no transpose)."""
    n, c, _, _ = x.shape
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, xshape, kh, kw, stride, ho, wo) -> np.ndarray:
    n, c, hp, wp = xshape
    dx = np.zeros(xshape, dtype=np.float64)
    d6 = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    return dx


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """Batched 2-d cross-correlation with zero padding.

    ``x`` is (C,H,W) or (N,C,H,W); kernels (K,C,kh,kw); optional bias (K,).
    Output spatial extents: floor((H + 2*pad - kh)/stride) + 1.
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: got input {x.shape}, kernels {kernels.shape}")
    n, c, h, w = xd.shape
    k, ck, kh, kw = kernels.shape
    if ck != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ck}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({k},)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)  # (N, C*kh*kw, ho*wo)
    kmat = kernels.data.reshape(k, c * kh * kw)
    y = np.matmul(kmat, cols)  # (N, K, ho*wo), batched over N
    if bias is not None:
        y += bias.data[:, None]
    y = y.reshape(n, k, ho, wo)
    out = Tensor(y[0] if single else y)

    need_dx, need_dk = x.requires_grad, kernels.requires_grad

    def bw(d):
        d3 = (d[None] if single else d).reshape(n, k, ho * wo)
        dk = dx = None
        if need_dk:
            dk = np.matmul(d3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.shape)
        if need_dx:
            dcols = np.matmul(kmat.T, d3)  # (N, C*kh*kw, ho*wo)
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
            dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
            if single:
                dx = dx[0]
        if bias is None:
            return (dx, dk)
        return (dx, dk, d3.sum(axis=(0, 2)))

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return record_op(out, inputs, bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing row/column dropped.

    Gradient routes to the first (row-major) maximal element of each window.
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2: expects (C,H,W) or (N,C,H,W), got {x.shape}")
    n, c, h, w = xd.shape
    hp, wp = h // 2, w // 2
    if hp < 1 or wp < 1:
        raise ShapeError(f"maxpool2: spatial extents {h}x{w} too small")
    # the four window corners as strided views (no copies)
    corners = tuple(xd[:, :, i:2 * hp:2, j:2 * wp:2] for i in range(2) for j in range(2))
    y = np.maximum(np.maximum(corners[0], corners[1]),
                   np.maximum(corners[2], corners[3]))
    out = Tensor(y[0] if single else y)

    def bw(d):
        d4 = d[None] if single else d
        dx = np.zeros_like(xd)
        taken = np.zeros(y.shape, dtype=bool)
        # route each window's gradient to its first (row-major) maximum
        for v, view in enumerate(corners):
            hit = (view == y) & ~taken
            np.copyto(dx[:, :, v // 2:2 * hp:2, v % 2:2 * wp:2], d4, where=hit)
            taken |= hit
        return (dx[0] if single else dx,)

    return record_op(out, (x,), bw)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps one tensor to a scalar tensor. The relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|); NaN anywhere
    yields +inf so callers see a failure rather than a silent pass.
    """
    p = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(p)
        backward(loss, tape)
    analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    flat = p.data.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(p).item()
        flat[i] = orig - h
        fm = f(p).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(p.data.shape)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return float("inf")
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())
