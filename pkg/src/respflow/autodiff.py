"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the primitives the respiration network needs: broadcasting
arithmetic, reductions, tanh/sigmoid, stride-1 same-padding convolution,
2x2 average pooling, temporal channel shifting and batch normalization.
Convolutions run per frame through im2col + BLAS matmul; backward passes
recompute the column matrices instead of caching them.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, _as_tensor(np.asarray(-1.0, dtype=self.data.dtype)))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def backward(self, grad=None):
        """Accumulate gradients of this tensor's (weighted) sum into the graph."""
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ValueError("cotangent shape must match tensor shape")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward(node.grad)):
                if not parent.requires_grad or pgrad is None:
                    continue
                parent.grad = pgrad if parent.grad is None else parent.grad + pgrad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data, requires_grad=_grad_enabled and any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data**2), b.shape),
        ),
    )


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape) / count,)

    return _make(data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out**2),))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


# -- network primitives ---------------------------------------------------


def _conv_frames(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    """Stride-1 correlation of [T, Ci, H, W] with [Co, Ci, k, k], same padding."""
    n_frames, _, h, width = x.shape
    c_out, _, k, _ = w.shape
    wmat = w.reshape(c_out, -1)
    out = np.empty((n_frames, c_out, h, width), dtype=x.dtype)
    for t in range(n_frames):
        if pad:
            xp = np.pad(x[t], ((0, 0), (pad, pad), (pad, pad)))
        else:
            xp = x[t]
        win = sliding_window_view(xp, (k, k), axis=(1, 2))
        cols = win.transpose(1, 2, 0, 3, 4).reshape(h * width, -1)
        out[t] = (cols @ wmat.T).T.reshape(c_out, h, width)
    return out


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, pad: int) -> np.ndarray:
    n_frames, c_in, h, width = x.shape
    c_out = g.shape[1]
    dw = np.zeros((c_out, c_in * k * k), dtype=x.dtype)
    for t in range(n_frames):
        if pad:
            xp = np.pad(x[t], ((0, 0), (pad, pad), (pad, pad)))
        else:
            xp = x[t]
        win = sliding_window_view(xp, (k, k), axis=(1, 2))
        cols = win.transpose(1, 2, 0, 3, 4).reshape(h * width, -1)
        dw += g[t].reshape(c_out, -1) @ cols
    return dw.reshape(c_out, c_in, k, k)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2-D convolution over [T, C, H, W] with odd square kernels, same padding."""
    k = w.data.shape[-1]
    if k % 2 == 0:
        raise ValueError("kernel size must be odd")
    pad = k // 2
    data = _conv_frames(x.data, w.data, pad)
    if b is not None:
        data += b.data[:, None, None]

    def backward(g):
        g = np.ascontiguousarray(g)
        w_flip = w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        dx = _conv_frames(g, np.ascontiguousarray(w_flip), pad)
        dw = _conv_weight_grad(x.data, g, k, pad)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward)


def avg_pool2x2(x: Tensor) -> Tensor:
    n_frames, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("avg_pool2x2 needs even spatial dimensions")
    data = x.data.reshape(n_frames, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return _make(data, (x,), backward)


def shift_channel_groups(x: np.ndarray, group: int, forward_first: bool) -> np.ndarray:
    """Shift the first ``group`` channels +1 in time and the next ``group``
    channels -1 (or the reverse), zero-filling vacated slots."""
    out = x.copy()
    if group == 0 or x.shape[0] == 0:
        return out
    a, b = (0, group) if forward_first else (group, 0)
    out[1:, a : a + group] = x[:-1, a : a + group]
    out[0, a : a + group] = 0.0
    out[:-1, b + group - a : b + 2 * group - a] = x[1:, b + group - a : b + 2 * group - a]
    out[-1, b + group - a : b + 2 * group - a] = 0.0
    return out


def temporal_shift(x: Tensor, fraction: float) -> Tensor:
    """Shift a fraction of channels one step forward and one step backward in time.

    The first floor(fraction*C/2) channels move +1 in time, the next group
    moves -1, the remainder is untouched; vacated slots are zero-filled.
    """
    if not 0.0 <= fraction <= 0.5:
        raise ValueError("fraction must lie in [0, 0.5]")
    if x.shape[0] == 0:
        raise ValueError("temporal_shift needs at least one frame")
    group = int(fraction * x.shape[1] / 2)
    data = _shift_data(x.data, group)

    def backward(g):
        # Adjoint of a time shift is the opposite shift with zero fill.
        return (_shift_data(g, group, adjoint=True),)

    return _make(data, (x,), backward)


def _shift_data(x: np.ndarray, group: int, adjoint: bool = False) -> np.ndarray:
    out = x.copy()
    if group == 0:
        return out
    fwd, bwd = (slice(0, group), slice(group, 2 * group))
    if adjoint:
        fwd, bwd = bwd, fwd
    out[1:, fwd] = x[:-1, fwd]
    out[0, fwd] = 0.0
    out[:-1, bwd] = x[1:, bwd]
    out[-1, bwd] = 0.0
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_running: bool = True,
) -> Tensor:
    """Per-channel batch normalization over the (time, H, W) axes of [T, C, H, W].

    ``train`` selects batch statistics (optionally folded into the running
    estimates in place); otherwise the running statistics are used.
    """
    axes = (0, 2, 3)
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[:, None, None]) * inv[:, None, None]
    data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gxhat = g * gamma.data[:, None, None]
        if train:
            count = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            dx = (inv[:, None, None] / count) * (
                count * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = gxhat * inv[:, None, None]
        return dx, dgamma, dbeta

    return _make(data, (x, gamma, beta), backward)
