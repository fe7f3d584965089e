"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient. A tape is confined to the thread that opened it;
independent tapes may run concurrently on different threads.

    with Tape() as tape:
        y = softmax_rows(x @ w)
        loss = y.sum()
    (gw,) = tape.gradient(loss, [w])
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float64 array that can participate in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return self._index

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self, grad_output=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self._tape is None:
            raise TapeError("backward() called on a tensor that was not recorded on a tape")
        self._tape.backward(self, grad_output)

    # operator sugar -------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class _Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations, replayed in reverse by :meth:`gradient`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._thread = None

    @property
    def next_id(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        self._thread = threading.get_ident()
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tapes must be closed in LIFO order")
        stack.pop()

    def record(self, kind: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        if self._thread is not None and self._thread != threading.get_ident():
            raise TapeError("a tape is confined to the thread that opened it")
        output._tape = self
        output._index = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(_Node(kind, tuple(inputs), output, backward_fn))

    def _replay(self, target: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(target): seed}
        for node in reversed(self.nodes[: target._index + 1]):
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return grads

    def _seed(self, target: Tensor, grad_output) -> np.ndarray:
        if target._tape is not self:
            raise TapeError("target tensor was not produced on this tape")
        if grad_output is None:
            if target.size != 1:
                raise TapeError(f"gradient of non-scalar {target.shape} needs grad_output")
            return np.ones_like(target.data)
        seed = np.asarray(grad_output, dtype=np.float64)
        if seed.shape != target.shape:
            raise DimensionError(f"grad_output shape {seed.shape} != target shape {target.shape}")
        return seed

    def gradient(self, target: Tensor, sources: Sequence[Tensor], grad_output=None) -> list[np.ndarray]:
        """Vector-Jacobian product of ``target`` w.r.t. each source.

        Sources not reachable from ``target`` get zeros.
        """
        grads = self._replay(target, self._seed(target, grad_output))
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else np.broadcast_to(g, s.shape).copy())
        return out

    def backward(self, target: Tensor, grad_output=None) -> None:
        grads = self._replay(target, self._seed(target, grad_output))
        for node in self.nodes:
            for inp in node.inputs:
                if inp._tape is None and inp.requires_grad:
                    g = grads.get(id(inp))
                    if g is None:
                        continue
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g
                    grads.pop(id(inp))


def _make(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if out.dtype.kind == "f" and np.isnan(out).any():
        raise NumericError(f"{kind} produced NaN")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.requires_grad = False
    result.grad = None
    result._tape = None
    result._index = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, result, backward_fn)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# pointwise activations ----------------------------------------------------

def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_POINTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def pointwise(kind: str, x) -> Tensor:
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ConfigurationError(f"unknown pointwise kind {kind!r}") from None
    return fn(x)


# reductions and shape ops -------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make("sum", np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", np.array(a.data[index]), (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make("concat", np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("broadcast", np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


# linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), back)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis with max-subtraction."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), back)


def logsumexp_rows(x) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    soft = e / s
    return _make("logsumexp", out, (x,), lambda g: (g[..., None] * soft,))


# convolution and normalization --------------------------------------------

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    return (x[None], True) if x.ndim == 3 else (x, False)


def conv2d(x, weight, bias=None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    ``x`` is ``[c_in, H, W]`` or batched ``[N, c_in, H, W]``;
    ``weight`` is ``[c_out, c_in, 3, 3]``; ``bias`` is ``[c_out]`` or None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xb, squeeze = _as_batch(x.data)
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects a [c_out, c_in, 3, 3] kernel, got {weight.shape}")
    if xb.ndim != 4 or xb.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    w = weight.data
    padded = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(padded, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    out = np.einsum("nchwij,ocij->nohw", cols, w, optimize=True)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        inputs.append(bias)

    def back(g):
        gb = g[None] if squeeze else g
        gw = np.einsum("nohw,nchwij->ocij", gb, cols, optimize=True)
        gpad = np.pad(gb, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gcols = sliding_window_view(gpad, (3, 3), axis=(2, 3))  # N, O, H, W, 3, 3
        gx = np.einsum("nohwij,ocij->nchw", gcols, w[:, :, ::-1, ::-1], optimize=True)
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make("conv2d", out[0] if squeeze else out, inputs, back)


def default_groups(channels: int) -> int:
    """Largest divisor of ``channels`` not exceeding min(32, channels)."""
    g = min(32, channels)
    while channels % g:
        g -= 1
    return g


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Group normalization over ``[c, H, W]`` or ``[N, c, H, W]`` with per-channel affine."""
    x = as_tensor(x)
    xb, squeeze = _as_batch(x.data)
    n, c = xb.shape[:2]
    if groups <= 0 or c % groups:
        raise ConfigurationError(f"{c} channels are not divisible into {groups} groups")
    grouped = xb.reshape(n, groups, -1)
    mu = grouped.mean(axis=2, keepdims=True)
    centered = grouped - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv).reshape(xb.shape)
    gamma = np.ones(c) if weight is None else as_tensor(weight).data
    beta = np.zeros(c) if bias is None else as_tensor(bias).data
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    inputs = [x]
    if weight is not None:
        inputs.append(as_tensor(weight))
    if bias is not None:
        inputs.append(as_tensor(bias))

    def back(g):
        gb = g[None] if squeeze else g
        dxhat = (gb * gamma[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        dx = dx.reshape(xb.shape)
        grads = [dx[0] if squeeze else dx]
        if weight is not None:
            grads.append((gb * xhat).sum(axis=(0, 2, 3)))
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make("group_norm", out[0] if squeeze else out, inputs, back)


def backward(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` for ``params``; unreachable ones get zeros."""
    if loss._tape is None:
        raise TapeError("backward on a detached tensor")
    return loss._tape.gradient(loss, list(params))
