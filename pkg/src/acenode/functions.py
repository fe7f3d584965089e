"""Parameterized ODE right-hand sides: conv blocks, tanh MLPs, continuous GRU cells."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, DimensionError, Tensor

Params = dict[str, Tensor]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return T.parameter(rng.uniform(-bound, bound, size=shape))


def _time_column(x: Tensor, t: float) -> Tensor:
    return T.concat([x, Tensor(np.full(x.shape[:-1] + (1,), t))], axis=-1)


def _time_channel(x: Tensor, t: float) -> Tensor:
    shape = list(x.shape)
    shape[-3] = 1
    return T.concat([x, Tensor(np.full(shape, t))], axis=-3)


# conv block ---------------------------------------------------------------

def init_conv_block(channels: int, layers: int, rng: np.random.Generator,
                    groups: int | None = None) -> Params:
    if layers not in (2, 3):
        raise ConfigurationError("conv blocks have 2 or 3 layers")
    fan_in = (channels + 1) * 9
    p: Params = {
        "norm1.weight": T.parameter(np.ones(channels)),
        "norm1.bias": T.parameter(np.zeros(channels)),
    }
    convs = ["conv2"] if layers == 3 else []
    convs.append("conv3")
    for i, name in enumerate(convs):
        c_in = channels + 1 if i == 0 else channels
        p[f"{name}.weight"] = _uniform(rng, (channels, c_in, 3, 3), c_in * 9 if i else fan_in)
        p[f"{name}.bias"] = T.parameter(np.zeros(channels))
        norm = name.replace("conv", "norm")
        p[f"{norm}.weight"] = T.parameter(np.ones(channels))
        p[f"{norm}.bias"] = T.parameter(np.zeros(channels))
    return p


def eval_conv_block(p: Params, x: Tensor, t: float, layers: int, groups: int | None = None) -> Tensor:
    """ReLU(GroupNorm) -> [ReLU(GroupNorm(Conv))] -> GroupNorm(Conv).

    The middle layer is present only for ``layers=3``. Time enters as a constant
    channel ahead of the first convolution.
    """
    c = x.shape[-3]
    if p["norm1.weight"].shape[0] != c:
        raise DimensionError(f"conv block built for {p['norm1.weight'].shape[0]} channels, got input {x.shape}")
    g = groups or T.default_groups(c)
    h = T.relu(T.group_norm(x, g, p["norm1.weight"], p["norm1.bias"]))
    h = _time_channel(h, t)
    if layers == 3:
        h = T.relu(T.group_norm(T.conv2d(h, p["conv2.weight"], p["conv2.bias"]), g,
                                p["norm2.weight"], p["norm2.bias"]))
    return T.group_norm(T.conv2d(h, p["conv3.weight"], p["conv3.bias"]), g,
                        p["norm3.weight"], p["norm3.bias"])


# tanh MLP -----------------------------------------------------------------

def init_mlp_tanh(widths: Sequence[int], rng: np.random.Generator) -> Params:
    if len(widths) < 2 or widths[0] != widths[-1]:
        raise ConfigurationError(f"MLP widths must start and end at the state size, got {list(widths)}")
    p: Params = {}
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        fan_in = w_in + 1 if i == 0 else w_in
        p[f"linear{i}.weight"] = _uniform(rng, (fan_in, w_out), fan_in)
        p[f"linear{i}.bias"] = T.parameter(np.zeros(w_out))
    return p


def eval_mlp_tanh(p: Params, x: Tensor, t: float, final_linear: bool = True) -> Tensor:
    """Tanh(Linear) stack on ``[x, t]``; the last layer stays linear if ``final_linear``."""
    n_layers = len(p) // 2
    if p["linear0.weight"].shape[0] != x.shape[-1] + 1:
        raise ConfigurationError(f"MLP expects state size {p['linear0.weight'].shape[0] - 1}, got {x.shape}")
    h = _time_column(x, t)
    for i in range(n_layers):
        h = h @ p[f"linear{i}.weight"] + p[f"linear{i}.bias"]
        if i < n_layers - 1 or not final_linear:
            h = T.tanh(h)
    return h


# continuous GRU -----------------------------------------------------------

def init_gru_cell(d: int, rng: np.random.Generator, input_dim: int = 0) -> Params:
    p: Params = {}
    for gate in ("z", "r", "c"):
        p[f"W_{gate}"] = _uniform(rng, (d, d), d + input_dim)
        if input_dim:
            p[f"V_{gate}"] = _uniform(rng, (input_dim, d), d + input_dim)
        p[f"b_{gate}"] = T.parameter(np.zeros(d))
    return p


def eval_gru_cell(p: Params, x: Tensor, t: float, inp: Tensor | None = None) -> Tensor:
    """dh/dt = (1 - z) * (c - h) with z, r, c the usual GRU gates of the state.

    ``inp`` is an optional driving input feeding every gate (used when the
    attention logits evolve under the influence of the hidden state).
    The cell is autonomous; ``t`` is accepted for a uniform signature.
    """
    d = p["W_z"].shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"GRU cell of size {d} got state {x.shape}")

    def gate(name, state):
        pre = state @ p[f"W_{name}"] + p[f"b_{name}"]
        if inp is not None:
            pre = pre + inp @ p[f"V_{name}"]
        return pre

    z = T.sigmoid(gate("z", x))
    r = T.sigmoid(gate("r", x))
    c = T.tanh(gate("c", r * x))
    return (1.0 - z) * (c - x)


# uniform wrapper ----------------------------------------------------------

class OdeFunction:
    """A right-hand side together with its parameter collection.

    ``kind`` is one of ``conv_block``, ``mlp_tanh``, ``gru_cell`` or ``zero``.
    """

    def __init__(self, kind: str, params: Params, in_shape: tuple[int, ...], **options):
        if kind not in ("conv_block", "mlp_tanh", "gru_cell", "zero"):
            raise ConfigurationError(f"unknown ODE function kind {kind!r}")
        self.kind = kind
        self.params = params
        self.in_shape = tuple(in_shape)
        self.out_shape = self.in_shape
        self.options = options

    @classmethod
    def conv_block(cls, channels: int, height: int, width: int, layers: int, rng) -> "OdeFunction":
        return cls("conv_block", init_conv_block(channels, layers, rng), (channels, height, width), layers=layers)

    @classmethod
    def mlp_tanh(cls, widths: Sequence[int], rng, final_linear: bool = True) -> "OdeFunction":
        return cls("mlp_tanh", init_mlp_tanh(widths, rng), (widths[0],), final_linear=final_linear)

    @classmethod
    def gru_cell(cls, d: int, rng, input_dim: int = 0) -> "OdeFunction":
        return cls("gru_cell", init_gru_cell(d, rng, input_dim), (d,), input_dim=input_dim)

    @classmethod
    def zero(cls, shape) -> "OdeFunction":
        return cls("zero", {}, tuple(shape))

    def __call__(self, x: Tensor, t: float, inp: Tensor | None = None) -> Tensor:
        if self.kind == "conv_block":
            return eval_conv_block(self.params, x, t, self.options["layers"])
        if self.kind == "mlp_tanh":
            return eval_mlp_tanh(self.params, x, t, self.options["final_linear"])
        if self.kind == "gru_cell":
            return eval_gru_cell(self.params, x, t, inp)
        return x * 0.0

    def parameter_count(self) -> int:
        return parameter_count(self.params)


def parameter_count(params: Params) -> int:
    return int(sum(p.size for p in params.values()))
