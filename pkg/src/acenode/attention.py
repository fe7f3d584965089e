"""Attention for co-evolving hidden/attention ODE pairs.

The hidden state ``h`` and the attention logits ``a`` are integrated together
as one flat vector; :class:`StateLayout` packs and unpacks them. Pairwise
attention mixes the dimensions of ``h`` with a row-softmax of ``a``;
elementwise attention gates ``h`` with ``sigmoid(a)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, DimensionError, Tensor


class AttentionKind(str, enum.Enum):
    PAIRWISE = "pairwise"
    ELEMENTWISE = "elementwise"
    FIXED_CORRELATION = "fixed_correlation"
    NONE = "none"


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class StateLayout:
    """Shapes of the two halves of a packed state (``a_shape`` empty when no attention)."""

    h_shape: tuple[int, ...]
    a_shape: tuple[int, ...] = ()

    @property
    def h_size(self) -> int:
        return int(np.prod(self.h_shape))

    @property
    def a_size(self) -> int:
        return int(np.prod(self.a_shape)) if self.a_shape else 0

    @property
    def size(self) -> int:
        return self.h_size + self.a_size

    def pack(self, h, a=None):
        if isinstance(h, Tensor) or isinstance(a, Tensor):
            parts = [T.reshape(h, (self.h_size,))]
            if self.a_size:
                parts.append(T.reshape(a, (self.a_size,)))
            return parts[0] if len(parts) == 1 else T.concat(parts)
        parts = [np.asarray(h, dtype=np.float64).reshape(-1)]
        if self.a_size:
            parts.append(np.asarray(a, dtype=np.float64).reshape(-1))
        return np.concatenate(parts)

    def unpack(self, y):
        if isinstance(y, Tensor):
            h = T.reshape(y[: self.h_size], self.h_shape)
            a = T.reshape(y[self.h_size:], self.a_shape) if self.a_size else None
            return h, a
        h = y[: self.h_size].reshape(self.h_shape)
        a = y[self.h_size:].reshape(self.a_shape) if self.a_size else None
        return h, a


@dataclass
class AceState:
    h: Tensor
    a: Tensor | None
    kind: AttentionKind

    def __post_init__(self):
        kind = AttentionKind(self.kind)
        self.kind = kind
        if kind is AttentionKind.PAIRWISE:
            d = self.h.shape[-1]
            if self.a.shape[-2:] != (d, d):
                raise DimensionError(f"pairwise attention must be {d}x{d}, got {self.a.shape}")
        elif kind is AttentionKind.ELEMENTWISE and self.a.shape != self.h.shape:
            raise DimensionError(f"elementwise attention shape {self.a.shape} != hidden shape {self.h.shape}")

    @property
    def layout(self) -> StateLayout:
        return StateLayout(tuple(self.h.shape), tuple(self.a.shape) if self.a is not None else ())

    def pack(self):
        return self.layout.pack(self.h, self.a)

    @classmethod
    def unpack(cls, y, layout: StateLayout, kind) -> "AceState":
        h, a = layout.unpack(y)
        return cls(T.as_tensor(h), None if a is None else T.as_tensor(a), kind)


def apply_pairwise(h, a) -> Tensor:
    """h'_i = sum_j softmax(a)_ij h_j, batched over leading axes of ``h``."""
    h, a = T.as_tensor(h), T.as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"pairwise attention must be square, got {a.shape}")
    if a.shape[-1] != h.shape[-1]:
        raise DimensionError(f"attention {a.shape} does not match hidden {h.shape}")
    col = T.reshape(h, h.shape + (1,))
    mixed = T.softmax_rows(a) @ col
    return T.reshape(mixed, h.shape)


def apply_elementwise(h, a) -> Tensor:
    h, a = T.as_tensor(h), T.as_tensor(a)
    if h.shape != a.shape:
        raise DimensionError(f"elementwise attention shape {a.shape} != hidden shape {h.shape}")
    return h * T.sigmoid(a)


_ZERO_STD = 1e-12


def correlation(window) -> Tensor:
    """Pearson correlation across columns of ``[n, d]`` (or batched ``[N, n, d]``).

    Columns with zero variance get 0 off the diagonal; the diagonal is exactly 1.
    Differentiable when ``window`` is on a tape.
    """
    w = T.as_tensor(window)
    n, d = w.shape[-2:]
    if n < 2:
        raise InsufficientDataError(f"correlation needs at least 2 observations, got {n}")
    centered = w - T.mean(w, axis=-2, keepdims=True)
    cov = T.transpose(centered) @ centered
    var = T.tsum(centered * centered, axis=-2)
    degenerate = var.data <= (_ZERO_STD ** 2) * n
    safe_var = var + Tensor(degenerate.astype(np.float64))
    std = T.sqrt(safe_var)
    denom = T.reshape(std, std.shape + (1,)) @ T.reshape(std, std.shape[:-1] + (1, d))
    corr = cov / denom
    eye = np.eye(d)
    mask = (1.0 - eye)
    # zero out rows/columns of degenerate columns, force unit diagonal
    keep = (~degenerate).astype(np.float64)
    mask = mask * keep[..., :, None] * keep[..., None, :]
    corr = corr * Tensor(mask) + Tensor(np.broadcast_to(eye, mask.shape))
    return _clip_unit(corr)


def _clip_unit(x: Tensor) -> Tensor:
    inside = np.abs(x.data) <= 1.0
    return T._make("clip", np.clip(x.data, -1.0, 1.0), (x,), lambda g: (g * inside,))


def init_attention_correlation(window) -> np.ndarray:
    return correlation(np.asarray(window, dtype=np.float64)).data


def init_fc_attention(d: int, rng: np.random.Generator, zero: bool = False) -> dict[str, Tensor]:
    w = np.zeros((d, d * d)) if zero else rng.uniform(-1, 1, size=(d, d * d)) / np.sqrt(d)
    return {"weight": T.parameter(w), "bias": T.parameter(np.zeros(d * d))}


def init_conv_attention(channels: int, rng: np.random.Generator, zero: bool = False) -> dict[str, Tensor]:
    p = {}
    for i in (1, 2):
        shape = (channels, channels, 3, 3)
        w = np.zeros(shape) if zero else rng.uniform(-1, 1, size=shape) / np.sqrt(channels * 9)
        p[f"conv{i}.weight"] = T.parameter(w)
        p[f"conv{i}.bias"] = T.parameter(np.zeros(channels))
    return p


def init_elementwise_fc(d: int, rng: np.random.Generator, zero: bool = False,
                        gain: float = 5.0) -> dict[str, Tensor]:
    """``d -> d`` gate generator.

    The diagonal starts at ``+-gain`` so each initial gate is already a steep
    function of its own element; near-zero weights leave every gate at 0.5
    and the coupled system starts out indistinguishable from a plain flow.
    """
    if zero:
        w = np.zeros((d, d))
    else:
        w = rng.uniform(-1, 1, size=(d, d)) / np.sqrt(d) + np.diag(gain * rng.choice([-1.0, 1.0], size=d))
    return {"weight": T.parameter(w), "bias": T.parameter(np.zeros(d))}


def init_attention_network(h0, params: dict[str, Tensor], kind) -> Tensor:
    """a(0) from h(0) with a small network.

    Pairwise: a fully connected map from ``[N, d]`` to ``[N, d, d]`` logits.
    Elementwise on vectors: a fully connected ``d -> d`` map.
    Elementwise on feature maps: conv -> ReLU -> conv, shape preserving.
    """
    h0 = T.as_tensor(h0)
    kind = AttentionKind(kind)
    if kind is AttentionKind.PAIRWISE:
        if "weight" not in params or h0.ndim not in (1, 2):
            raise ConfigurationError("pairwise attention needs an FC generator on vector states")
        d = h0.shape[-1]
        if params["weight"].shape != (d, d * d):
            raise ConfigurationError(f"FC generator shaped {params['weight'].shape}, expected {(d, d * d)}")
        logits = T.reshape(h0, (-1, d)) @ params["weight"] + params["bias"]
        return T.reshape(logits, h0.shape[:-1] + (d, d))
    if kind is AttentionKind.ELEMENTWISE:
        if "conv1.weight" in params:
            if h0.ndim not in (3, 4) or params["conv1.weight"].shape[1] != h0.shape[-3]:
                raise ConfigurationError(f"conv generator does not fit state {h0.shape}")
            x = T.relu(T.conv2d(h0, params["conv1.weight"], params["conv1.bias"]))
            return T.conv2d(x, params["conv2.weight"], params["conv2.bias"])
        if "weight" not in params or params["weight"].shape[0] != h0.shape[-1]:
            raise ConfigurationError(f"FC generator does not fit state {h0.shape}")
        d = h0.shape[-1]
        return T.reshape(T.reshape(h0, (-1, d)) @ params["weight"] + params["bias"], h0.shape)
    raise ConfigurationError(f"{kind.value} attention has no generator network")


def coupled_rhs(f, g, h: Tensor, a: Tensor | None, t: float, kind, window: Tensor | None = None):
    """Derivatives ``(dh/dt, da/dt)`` of the co-evolving pair.

    The attended hidden state is computed once and fed to both ``f`` and ``g``.
    ``g`` is called as ``g(a, t, attended)`` when it is a GRU cell over the
    attention logits (pairwise), otherwise as ``g(attended, t)``.
    For ``none`` the raw ``h`` goes to ``f`` and ``da/dt`` is None; for
    ``fixed_correlation`` the logits are the correlation of ``window`` with its
    last row replaced by the current ``h``, and ``da/dt`` is None.
    """
    kind = AttentionKind(kind)
    if kind is AttentionKind.NONE:
        return f(h, t), None
    if kind is AttentionKind.FIXED_CORRELATION:
        if window is None:
            raise ConfigurationError("fixed_correlation attention needs the observed window")
        running = T.concat([window[..., :-1, :], T.reshape(h, h.shape[:-1] + (1, h.shape[-1]))], axis=-2)
        attended = apply_pairwise(h, correlation(running))
        return f(attended, t), None
    if kind is AttentionKind.PAIRWISE:
        attended = apply_pairwise(h, a)
        da = _pairwise_g(g, a, attended, t)
    else:
        attended = apply_elementwise(h, a)
        da = g(attended, t)
    return f(attended, t), da


def _pairwise_g(g, a: Tensor, attended: Tensor, t: float) -> Tensor:
    d = a.shape[-1]
    flat = T.reshape(a, a.shape[:-2] + (d * d,))
    out = g(flat, t, attended)
    return T.reshape(out, a.shape)
