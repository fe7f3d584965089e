"""Model assembly: encoder -> (h(0), a(0)) -> coupled ODE -> readout.

Parameters are kept in four named groups matching the training schedule:
``f`` (hidden-state ODE), ``g`` (attention ODE), ``q`` (initial-attention
generator) and ``others`` (encoder and readout).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (AttentionKind, StateLayout, coupled_rhs, correlation, init_attention_network,
                        init_conv_attention, init_elementwise_fc, init_fc_attention)
from .functions import OdeFunction, Params, _uniform, parameter_count
from .tensor import ConfigurationError, Tensor

MODEL_KINDS = ("node", "augmented_node", "ace_pairwise", "ace_elementwise", "fixed_corr", "fc_init")
TASKS = ("crossing", "var_forecast", "mnist")
AUGMENT_DIMS = 5

_ATTENTION = {
    "node": AttentionKind.NONE,
    "augmented_node": AttentionKind.NONE,
    "ace_pairwise": AttentionKind.PAIRWISE,
    "fc_init": AttentionKind.PAIRWISE,
    "ace_elementwise": AttentionKind.ELEMENTWISE,
    "fixed_corr": AttentionKind.FIXED_CORRELATION,
}


@dataclass
class Context:
    """Per-batch constants the right-hand side needs besides the state."""

    layout: StateLayout
    window: Tensor | None = None


@dataclass
class AceModel:
    task: str
    kind: str
    attention: AttentionKind
    f: OdeFunction
    g: OdeFunction | None
    q: Params
    others: Params
    encoder: Callable[[Params, np.ndarray], Tensor]
    decoder: Callable[[Params, Tensor], Tensor]
    init_mode: str | None  # "correlation", "network" or None
    t1: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def groups(self) -> dict[str, Params]:
        return {"f": self.f.params, "g": self.g.params if self.g is not None else {},
                "q": self.q, "others": self.others}

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for group, params in self.groups.items():
            for name, p in params.items():
                out[f"{group}.{name}"] = p
        return out

    def parameter_counts(self) -> dict[str, int]:
        counts = {group: parameter_count(p) for group, p in self.groups.items()}
        counts["total"] = sum(counts.values())
        return counts

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ConfigurationError(f"checkpoint does not fit model: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ConfigurationError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()

    # forward pieces -----------------------------------------------------
    def initial_state(self, x: np.ndarray) -> tuple[Tensor, Context]:
        """Packed y(0) built from tape-tracked operations when a tape is active."""
        h0 = self.encoder(self.others, x)
        window = None
        if self.task == "var_forecast":
            window = Tensor(x)
        if self.attention in (AttentionKind.NONE, AttentionKind.FIXED_CORRELATION):
            layout = StateLayout(tuple(h0.shape))
            return layout.pack(h0), Context(layout, window)
        if self.init_mode == "correlation":
            a0 = correlation(window)
        else:
            a0 = init_attention_network(h0, self.q, self.attention)
        layout = StateLayout(tuple(h0.shape), tuple(a0.shape))
        return layout.pack(h0, a0), Context(layout, window)

    def rhs(self, y, t: float, ctx: Context) -> Tensor:
        y = T.as_tensor(y)
        h, a = ctx.layout.unpack(y)
        dh, da = coupled_rhs(self.f, self.g, h, a, t, self.attention, ctx.window)
        return ctx.layout.pack(dh, da)

    def readout(self, y1, ctx: Context) -> Tensor:
        h1, _ = ctx.layout.unpack(T.as_tensor(y1))
        return self.decoder(self.others, h1)


# builders -----------------------------------------------------------------

def build_model(task: str, kind: str, rng: np.random.Generator, **dims) -> AceModel:
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}")
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model {kind!r}")
    return {"crossing": _build_crossing, "var_forecast": _build_var, "mnist": _build_mnist}[task](kind, rng, **dims)


def _first_column(params, h1):
    return h1[:, 0]


def _build_crossing(kind: str, rng, hidden: int = 32, **_) -> AceModel:
    if kind not in ("node", "augmented_node", "ace_elementwise"):
        raise ConfigurationError(f"crossing task supports node, augmented_node, ace_elementwise; got {kind!r}")
    aug = AUGMENT_DIMS if kind == "augmented_node" else 0
    d = 1 + aug

    def encoder(params, x):
        x = Tensor(x)
        if aug:
            x = T.concat([x, Tensor(np.zeros((x.shape[0], aug)))], axis=1)
        return x

    f = OdeFunction.mlp_tanh([d, hidden, d], rng)
    g = q = None
    init_mode = None
    if kind == "ace_elementwise":
        g = OdeFunction.mlp_tanh([d, hidden, d], rng)
        q = init_elementwise_fc(d, rng)
        init_mode = "network"
    return AceModel("crossing", kind, _ATTENTION[kind], f, g, q or {}, {}, encoder, _first_column, init_mode,
                    meta={"state_dim": d})


def _build_var(kind: str, rng, d: int = 5, **_) -> AceModel:
    if kind == "ace_elementwise":
        raise ConfigurationError("var_forecast uses pairwise attention variants, not ace_elementwise")
    aug = AUGMENT_DIMS if kind == "augmented_node" else 0
    width = d + aug

    def encoder(params, x):
        last = Tensor(x[:, -1, :])
        if aug:
            last = T.concat([last, Tensor(np.zeros((x.shape[0], aug)))], axis=1)
        return last

    def decoder(params, h1):
        return h1[:, :d] if aug else h1

    f = OdeFunction.gru_cell(width, rng)
    g = None
    q: Params = {}
    init_mode = None
    if kind in ("ace_pairwise", "fc_init"):
        g = OdeFunction.gru_cell(d * d, rng, input_dim=d)
        init_mode = "correlation" if kind == "ace_pairwise" else "network"
        if kind == "fc_init":
            q = init_fc_attention(d, rng)
    return AceModel("var_forecast", kind, _ATTENTION[kind], f, g, q, {}, encoder, decoder, init_mode,
                    meta={"state_dim": width, "d": d})


def _build_mnist(kind: str, rng, channels: int = 16, image_size: int = 14, classes: int = 10, **_) -> AceModel:
    if kind not in ("node", "augmented_node", "ace_elementwise"):
        raise ConfigurationError(f"mnist supports node, augmented_node, ace_elementwise; got {kind!r}")
    if image_size % 2:
        raise ConfigurationError("image_size must be even")
    aug = AUGMENT_DIMS if kind == "augmented_node" else 0
    c = channels
    width = c + aug
    side = image_size // 2
    groups = T.default_groups(c)
    others: Params = {
        "enc.conv1.weight": _uniform(rng, (c, 1, 3, 3), 9),
        "enc.conv1.bias": T.parameter(np.zeros(c)),
        "enc.norm1.weight": T.parameter(np.ones(c)),
        "enc.norm1.bias": T.parameter(np.zeros(c)),
        "enc.conv2.weight": _uniform(rng, (c, c, 3, 3), 9 * c),
        "enc.conv2.bias": T.parameter(np.zeros(c)),
        "enc.norm2.weight": T.parameter(np.ones(c)),
        "enc.norm2.bias": T.parameter(np.zeros(c)),
        "head.norm.weight": T.parameter(np.ones(width)),
        "head.norm.bias": T.parameter(np.zeros(width)),
        "head.linear.weight": _uniform(rng, (width, classes), width),
        "head.linear.bias": T.parameter(np.zeros(classes)),
    }

    def encoder(p, x):
        h = T.relu(T.group_norm(T.conv2d(Tensor(x), p["enc.conv1.weight"], p["enc.conv1.bias"]), groups,
                                p["enc.norm1.weight"], p["enc.norm1.bias"]))
        n = h.shape[0]
        h = T.mean(T.reshape(h, (n, c, side, 2, side, 2)), axis=(3, 5))
        h = T.relu(T.group_norm(T.conv2d(h, p["enc.conv2.weight"], p["enc.conv2.bias"]), groups,
                                p["enc.norm2.weight"], p["enc.norm2.bias"]))
        if aug:
            h = T.concat([h, Tensor(np.zeros((n, aug, side, side)))], axis=1)
        return h

    def decoder(p, h1):
        h = T.relu(T.group_norm(h1, T.default_groups(width), p["head.norm.weight"], p["head.norm.bias"]))
        pooled = T.mean(h, axis=(2, 3))
        return pooled @ p["head.linear.weight"] + p["head.linear.bias"]

    layers = 2 if kind == "ace_elementwise" else 3
    f = OdeFunction.conv_block(width, side, side, layers, rng)
    g = None
    q: Params = {}
    init_mode = None
    if kind == "ace_elementwise":
        g = OdeFunction.conv_block(c, side, side, 3, rng)
        q = init_conv_attention(c, rng)
        init_mode = "network"
    return AceModel("mnist", kind, _ATTENTION[kind], f, g, q, others, encoder, decoder, init_mode,
                    meta={"channels": width, "side": side})


def build_toy(attention: str, rng, d: int = 2, g_kind: str = "linear") -> AceModel:
    """Small regression model on ``[N, d]`` inputs for gradient checks.

    ``f`` is one linear layer on ``[h, t]``. With pairwise attention ``g`` is
    either a linear map of the flattened logits (``g_kind="linear"``) or a GRU
    cell over them driven by the attended state (``g_kind="gru"``), and a(0)
    comes from an FC generator. Elementwise attention uses linear ``g`` and an
    FC generator. Encoder and readout are the identity.
    """
    kind = AttentionKind(attention)
    if kind is AttentionKind.FIXED_CORRELATION:
        raise ConfigurationError("toy models do not carry an observation window")
    f = OdeFunction.mlp_tanh([d, d], rng)
    g = None
    q: Params = {}
    init_mode = None
    if kind is AttentionKind.PAIRWISE:
        if g_kind == "gru":
            g = OdeFunction.gru_cell(d * d, rng, input_dim=d)
        elif g_kind == "linear":
            g = OdeFunction.mlp_tanh([d * d, d * d], rng)
        else:
            raise ConfigurationError(f"unknown toy generator {g_kind!r}")
        q = init_fc_attention(d, rng)
        init_mode = "network"
    elif kind is AttentionKind.ELEMENTWISE:
        g = OdeFunction.mlp_tanh([d, d], rng)
        q = {"weight": T.parameter(rng.uniform(-1, 1, size=(d, d))), "bias": T.parameter(np.zeros(d))}
        init_mode = "network"
    return AceModel("toy", f"toy_{kind.value}", kind, f, g, q, {}, lambda p, x: Tensor(x),
                    lambda p, h1: h1, init_mode, meta={"state_dim": d})
