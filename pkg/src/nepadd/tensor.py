"""Minimal tape-based reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs needs a gradient. :func:`backward` walks that tape in exact
reverse recording order. Frozen tensors behave like constants: nothing is
recorded for them and they never accumulate a gradient.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from nepadd import _accel
from nepadd.errors import ContractError, DomainError, ShapeError

_state = threading.local()


def _tls():
    if not hasattr(_state, "stack"):
        _state.stack = []
        _state.default = Tape()
        _state.enabled = True
    return _state


class Node:
    __slots__ = ("out", "inputs", "backward", "index", "tape")

    def __init__(self, out, inputs, backward, index, tape):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.index = index
        self.tape = tape


class Tape:
    """Ordered record of primitive ops. Use as a context manager to scope one step."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, out, inputs, backward):
        node = Node(out, inputs, backward, len(self.nodes), self)
        self.nodes.append(node)
        return node

    def reset(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tls().stack.append(self)
        return self

    def __exit__(self, *exc):
        _tls().stack.pop()
        return False


def current_tape() -> Tape:
    s = _tls()
    return s.stack[-1] if s.stack else s.default


@contextmanager
def no_grad():
    s = _tls()
    prev = s.enabled
    s.enabled = False
    try:
        yield
    finally:
        s.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "frozen", "name", "_node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.frozen = False
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def tracked(self):
        """True when gradients should flow through this tensor."""
        return self._node is not None or (self.requires_grad and not self.frozen)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Trainable tensor (requires_grad on by default, freezable)."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward):
    out = Tensor(data)
    if _tls().enabled and any(t.tracked for t in inputs):
        out.requires_grad = True
        out._node = current_tape().record(out, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable, unfrozen leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad and not loss.frozen:
            loss.grad += seed
        return
    node = loss._node
    nodes = node.tape.nodes
    if node.index >= len(nodes) or nodes[node.index] is not node:
        raise ContractError("loss belongs to a tape that has been reset")
    grads = {id(loss): seed}
    for i in range(node.index, -1, -1):
        n = nodes[i]
        g = grads.pop(id(n.out), None)
        if g is None:
            continue
        for inp, gi in zip(n.inputs, n.backward(g)):
            if gi is None or not inp.tracked:
                continue
            if inp._node is None:
                inp.grad += gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), bw)


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        bad = float(x.data.min())
        raise DomainError(f"log of non-positive input (min {bad!r}) in tensor of shape {x.shape}")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid_np(z):
    return np.exp(-np.logaddexp(0.0, -z))


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid_np(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0.0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def clip(x, lo=None, hi=None):
    """Clamp values; gradient is zero wherever the clamp is active."""
    x = as_tensor(x)
    y = np.clip(x.data, lo, hi)
    keep = y == x.data
    return _result(y, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions / shape


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(y, (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {x.shape}")
    return _result(x.data.T, (x,), lambda g: (g.T,))


def index(x, key):
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _result(x.data[key], (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise ShapeError(
                f"concat along axis {axis}: incompatible shapes {[u.shape for u in tensors]}"
            )
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def concat_lastdim(a, b):
    return concat([a, b], axis=-1)


def detach(x):
    return Tensor(as_tensor(x).data)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), bw)


def softmax_rows(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)


def log_softmax_rows(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), bw)


def layer_norm(x, axis=-1, eps=1e-5):
    """Zero-mean unit-variance normalization along ``axis`` (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _result(xhat, (x,), bw)


def conv1d(x, w, padding=0, stride=1):
    """1-D convolution. x: (C_in, T), w: (C_out, C_in, k) -> (C_out, T')."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1d shape mismatch: input {x.shape}, weight {w.shape}")
    c_in, T = x.shape
    c_out, _, k = w.shape
    if T + 2 * padding < k:
        raise ShapeError(f"conv1d input too short: T={T}, padding={padding}, kernel={k}")
    t_out = (T + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1)).reshape(c_in * k, t_out)
    w2 = w.data.reshape(c_out, c_in * k)

    def bw(g):
        gw = (g @ cols.T).reshape(w.shape)
        dcols = (w2.T @ g).reshape(c_in, k, t_out)
        gxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            gxp[:, j:j + span:stride] += dcols[:, j, :]
        gx = gxp[:, padding:padding + T] if padding else gxp
        return gx, gw

    return _result(w2 @ cols, (x, w), bw)


def lstm(x, w_ih, w_hh, b, reverse=False):
    """Single-direction LSTM over x: (T, D_in) -> hidden states (T, H).

    Weights: w_ih (D_in, 4H), w_hh (H, 4H), b (4H,), gate order (i, f, g, o).
    The recurrence runs in :mod:`nepadd.kernels` (numba or numpy backend).
    """
    x, w_ih, w_hh, b = (as_tensor(t) for t in (x, w_ih, w_hh, b))
    H = w_hh.shape[0]
    if x.ndim != 2 or w_ih.shape != (x.shape[1], 4 * H) or w_hh.shape != (H, 4 * H) \
            or b.shape != (4 * H,):
        raise ShapeError(
            f"lstm shape mismatch: x {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {b.shape}"
        )
    xin = x.data[::-1] if reverse else x.data
    xw = np.ascontiguousarray(xin @ w_ih.data + b.data)
    h, c, gates = _accel.lstm_forward(xw, w_hh.data)
    out = h[1:]

    def bw(g):
        gin = np.ascontiguousarray(g[::-1] if reverse else g)
        dz = _accel.lstm_backward(gin, c, gates, w_hh.data)
        dx = dz @ w_ih.data.T
        if reverse:
            dx = dx[::-1]
        return dx, xin.T @ dz, h[:-1].T @ dz, dz.sum(axis=0)

    return _result(out[::-1] if reverse else out, (x, w_ih, w_hh, b), bw)
