"""Reverse-mode automatic differentiation over dense float64 arrays.

Implements exactly the primitives the rest of the package needs: pointwise
arithmetic, matrix products, valid 1-d convolution, non-overlapping max
pooling, layer normalization, axis reductions and a few structural ops
(bias/column broadcasting, time-step gather, concatenation). Every primitive
records a node with a hand-written backward rule; ``backward`` linearizes the
recorded graph into a :class:`Tape` and walks it once in reverse, accumulating
gradients into the leaf tensors.

Broadcasting is deliberately restricted to scalar-vs-array and equal shapes;
anything richer (bias rows, per-column scaling) goes through a dedicated
primitive so gradient shapes stay unambiguous.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that suspends graph recording (forward values only)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Node:
    """One recorded primitive: input tensors plus a local backward closure.

    ``backward_fn(grad_out) -> tuple`` returns one gradient array (or None)
    per input, in input order.
    """

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Dense float64 array with optional gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def mean(self, axis=None):
        return mean_(self, axis=axis)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data, op, inputs, backward_fn) -> Tensor:
    """Wrap a result array, recording a node when any input tracks gradients."""
    track = _GRAD_ENABLED[0] and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


def _binary_out_shape(a: np.ndarray, b: np.ndarray, op: str):
    """Restricted broadcasting: equal shapes or one side is a scalar."""
    if a.shape == b.shape:
        return a.shape
    if a.size == 1 or b.size == 1:
        return b.shape if a.size == 1 else a.shape
    raise ValueError(
        f"{op}: unsupported broadcast between shapes {a.shape} and {b.shape}; "
        "only scalar-vs-array and equal shapes are allowed"
    )


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to a (possibly scalar) input shape."""
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape) if np.prod(shape, dtype=int) <= 1 else grad


# ----------------------------------------------------------------------
# pointwise primitives
# ----------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_out_shape(x.data, y.data, "add")
    out = x.data + y.data

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _make(out, "add", (x, y), bw)


def sub(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_out_shape(x.data, y.data, "sub")
    out = x.data - y.data

    def bw(g):
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return _make(out, "sub", (x, y), bw)


def mul(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_out_shape(x.data, y.data, "mul")
    out = x.data * y.data

    def bw(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return _make(out, "mul", (x, y), bw)


def div(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_out_shape(x.data, y.data, "div")
    if np.any(y.data == 0.0):
        raise ZeroDivisionError("div: denominator contains zero")
    out = x.data / y.data

    def bw(g):
        gx = _unbroadcast(g / y.data, x.shape)
        gy = _unbroadcast(-g * x.data / (y.data * y.data), y.shape)
        return gx, gy

    return _make(out, "div", (x, y), bw)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, "neg", (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0
    return _make(out, "relu", (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, "square", (x,), lambda g: (g * 2.0 * x.data,))


def abs_(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * np.sign(x.data),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    lo, hi = float(lo), float(hi)
    if lo > hi:
        raise ValueError(f"clip: lo={lo} exceeds hi={hi}")
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(out, "clip", (x,), lambda g: (g * inside,))


def minimum(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_out_shape(x.data, y.data, "minimum")
    out = np.minimum(x.data, y.data)
    # ties route to the first argument, for determinism
    take_x = x.data <= y.data

    def bw(g):
        return _unbroadcast(g * take_x, x.shape), _unbroadcast(g * ~take_x, y.shape)

    return _make(out, "minimum", (x, y), bw)


def maximum(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    _binary_out_shape(x.data, y.data, "maximum")
    out = np.maximum(x.data, y.data)
    take_x = x.data >= y.data

    def bw(g):
        return _unbroadcast(g * take_x, x.shape), _unbroadcast(g * ~take_x, y.shape)

    return _make(out, "maximum", (x, y), bw)


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------

def sum_(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(out, "sum", (x,), bw)


def mean_(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    out = np.mean(x.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _make(out, "mean", (x,), bw)


# ----------------------------------------------------------------------
# linear algebra and structure
# ----------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, "matmul", (a, b), bw)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a rank-1 vector along the last axis of x, summing grads back."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"bias_add: bias {b.shape} does not match last axis of {x.shape}")
    out = x.data + b.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        return g, g.sum(axis=lead)

    return _make(out, "bias_add", (x, b), bw)


def scale_cols(x: Tensor, v: Tensor) -> Tensor:
    """Multiply each column (last axis) of x by the rank-1 vector v."""
    if v.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ValueError(f"scale_cols: vector {v.shape} does not match last axis of {x.shape}")
    out = x.data * v.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        return g * v.data, (g * x.data).sum(axis=lead)

    return _make(out, "scale_cols", (x, v), bw)


def take_time(x: Tensor, t: int) -> Tensor:
    """Select time step t from a [time, ch] or [batch, time, ch] tensor."""
    if x.ndim == 2:
        out = x.data[t]
    elif x.ndim == 3:
        out = x.data[:, t, :]
    else:
        raise ValueError(f"take_time: expects rank 2 or 3, got {x.shape}")

    def bw(g):
        gx = np.zeros_like(x.data)
        if x.ndim == 2:
            gx[t] = g
        else:
            gx[:, t, :] = g
        return (gx,)

    return _make(out, "take_time", (x,), bw)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Select rows [start, stop) of a rank-2 tensor."""
    if x.ndim != 2:
        raise ValueError(f"slice_rows: expects rank 2, got {x.shape}")
    out = x.data[start:stop]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(out, "slice_rows", (x,), bw)


def concat(parts, axis: int = 0) -> Tensor:
    """Concatenate rank-2 tensors along rows (axis 0) or columns (axis 1)."""
    parts = [_as_tensor(p) for p in parts]
    if axis not in (0, 1):
        raise ValueError("concat: axis must be 0 or 1")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(out, "concat", tuple(parts), bw)


# ----------------------------------------------------------------------
# sequence primitives
# ----------------------------------------------------------------------

def conv1d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid (no padding) 1-d convolution over the time axis.

    x is [time, in_ch] or [batch, time, in_ch]; kernels is [k, in_ch, out_ch].
    Output time length is floor((T - k) / stride) + 1.
    """
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    if kernels.ndim != 3:
        raise ValueError(f"conv1d: kernels must be [k, in_ch, out_ch], got {kernels.shape}")
    batched = x.ndim == 3
    if not batched and x.ndim != 2:
        raise ValueError(f"conv1d: input must be rank 2 or 3, got {x.shape}")
    xd = x.data if batched else x.data[None]
    b_n, t_n, c_in = xd.shape
    k, kc_in, c_out = kernels.shape
    if kc_in != c_in:
        raise ValueError(f"conv1d: kernel channels {kc_in} != input channels {c_in}")
    if k > t_n:
        raise ValueError(f"conv1d: kernel length {k} exceeds input length {t_n}")
    t_out = (t_n - k) // stride + 1

    # im2col: windows [b, t_out, k, c_in] -> one matmul against [k*c_in, c_out]
    win = np.lib.stride_tricks.sliding_window_view(xd, k, axis=1)  # [b, t-k+1, c, k]
    win = win[:, ::stride].transpose(0, 1, 3, 2)                   # [b, t_out, k, c]
    cols = np.ascontiguousarray(win).reshape(b_n * t_out, k * c_in)
    kflat = kernels.data.reshape(k * c_in, c_out)
    out = (cols @ kflat).reshape(b_n, t_out, c_out)
    if not batched:
        out = out[0]

    def bw(g):
        gd = g if batched else g[None]
        gflat = gd.reshape(b_n * t_out, c_out)
        gk = (cols.T @ gflat).reshape(k, c_in, c_out)
        gcols = (gflat @ kflat.T).reshape(b_n, t_out, k, c_in)
        gx = np.zeros_like(xd)
        starts = np.arange(t_out) * stride
        for j in range(k):
            # within a fixed kernel offset the target rows are distinct
            gx[:, starts + j, :] += gcols[:, :, j, :]
        return (gx if batched else gx[0]), gk

    return _make(out, "conv1d", (x, kernels), bw)


def max_pool1d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max over time; a trailing remainder is dropped.

    Gradient routes to the first occurrence of the maximum in each window.
    """
    if window < 1:
        raise ValueError(f"max_pool1d: window must be >= 1, got {window}")
    batched = x.ndim == 3
    if not batched and x.ndim != 2:
        raise ValueError(f"max_pool1d: input must be rank 2 or 3, got {x.shape}")
    xd = x.data if batched else x.data[None]
    b_n, t_n, c_n = xd.shape
    t_out = t_n // window
    if t_out == 0:
        raise ValueError(f"max_pool1d: window {window} longer than input {t_n}")
    blocks = xd[:, : t_out * window, :].reshape(b_n, t_out, window, c_n)
    arg = np.argmax(blocks, axis=2)  # first occurrence on ties
    out = np.take_along_axis(blocks, arg[:, :, None, :], axis=2)[:, :, 0, :]
    if not batched:
        out = out[0]

    def bw(g):
        gd = g if batched else g[None]
        gblocks = np.zeros_like(blocks)
        np.put_along_axis(gblocks, arg[:, :, None, :], gd[:, :, None, :], axis=2)
        gx = np.zeros_like(xd)
        gx[:, : t_out * window, :] = gblocks.reshape(b_n, t_out * window, c_n)
        return (gx if batched else gx[0],)

    return _make(out, "max_pool1d", (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {n}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out, "layer_norm", (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity (deterministic) when not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the graph reachable from one output.

    Every tensor's inputs appear before it; a single reverse sweep therefore
    visits each node exactly once.
    """

    def __init__(self, output: Tensor):
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if id(parent) not in visited:
                        stack.append((parent, False))
        self.order = order  # inputs precede consumers
        self.output = output

    def backprop(self, seed: np.ndarray):
        grads: dict[int, np.ndarray] = {id(self.output): seed}
        for t in reversed(self.order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g
                continue
            for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = np.array(pg, dtype=np.float64, copy=True)
                else:
                    acc += pg


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Repeated calls without zeroing keep accumulating.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not connected to any tracked tensor")
    Tape(loss).backprop(np.ones_like(loss.data))
