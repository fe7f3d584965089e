"""Losses and gradients for the hidden and attention ODEs.

Gradients come from the adjoint method over the packed (h, a) state: the
forward pass keeps no graph, and a reverse-time integration of

    dy/dt = F(y),   dj/dt = -j^T dF/dy,   dG/dt = -j^T dF/dtheta

from t1 back to t0 yields dL/dy(t0) in ``j`` and dL/dtheta in ``G``. Two
oracles check it: central finite differences of the loss, and backpropagation
through the steps of a fixed-step solver on the tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import AceModel
from .solvers import SolverConfig, SolverError, SolverStats, integrate
from .tensor import ConfigurationError, Tape, Tensor


class DataError(ValueError):
    pass


class SizeError(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    task: str = "mse"  # "mse" or "cross_entropy"
    reg_norm: str = "L2sq"  # "L1", "L2" or "L2sq"
    lam: float = 0.0

    def __post_init__(self):
        if self.task not in ("mse", "cross_entropy"):
            raise ConfigurationError(f"unknown task loss {self.task!r}")
        if self.reg_norm not in ("L1", "L2", "L2sq"):
            raise ConfigurationError(f"unknown regularizer norm {self.reg_norm!r}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")


def loss_h(prediction, target, spec: LossSpec) -> Tensor:
    pred = T.as_tensor(prediction)
    target = np.asarray(target)
    if spec.task == "mse":
        if pred.shape != target.shape:
            raise DataError(f"prediction {pred.shape} and target {target.shape} differ")
        diff = pred - Tensor(target)
        return T.mean(diff * diff)
    labels = target.astype(np.int64)
    n, k = pred.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise DataError(f"class labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = T.tsum(pred * Tensor(onehot), axis=1)
    return T.mean(T.logsumexp_rows(pred) - picked)


def regularizer(params: Sequence[Tensor], norm: str) -> Tensor:
    if not params:
        return Tensor(0.0)
    if norm == "L1":
        return T.concat([T.reshape(T.tabs(p), (p.size,)) for p in params]).sum()
    sq = T.concat([T.reshape(p * p, (p.size,)) for p in params]).sum()
    if norm == "L2sq":
        return sq
    if sq.data == 0:
        # subgradient 0 at the origin
        return sq * 0.0
    return T.sqrt(sq)


def regularizer_grad(values: Sequence[np.ndarray], norm: str) -> list[np.ndarray]:
    """Closed-form (sub)gradient of the regularizer."""
    if norm == "L1":
        return [np.sign(v) for v in values]
    if norm == "L2sq":
        return [2.0 * v for v in values]
    total = np.sqrt(sum(float((v * v).sum()) for v in values))
    return [v / total if total > 0 else np.zeros_like(v) for v in values]


def loss_a(prediction, target, theta_g: Sequence[Tensor], spec: LossSpec) -> Tensor:
    task = loss_h(prediction, target, spec)
    if spec.lam == 0:
        return task
    return task + spec.lam * regularizer(list(theta_g), spec.reg_norm)


# gradients ------------------------------------------------------------------

@dataclass
class GradResult:
    loss: float
    task_loss: float
    grads: dict[str, np.ndarray]
    forward_stats: SolverStats = field(default_factory=SolverStats)
    backward_stats: SolverStats = field(default_factory=SolverStats)


def _forward(model: AceModel, x: np.ndarray, cfg: SolverConfig, stats: SolverStats):
    with Tape() as tape0:
        y0, ctx = model.initial_state(x)
    y1 = integrate(lambda y, t: model.rhs(Tensor(y), t, ctx).data, y0.data, 0.0, model.t1, cfg, stats=stats)
    return tape0, y0, ctx, y1


def predict(model: AceModel, x: np.ndarray, cfg: SolverConfig, stats: SolverStats | None = None) -> np.ndarray:
    y0, ctx = model.initial_state(x)
    y1 = integrate(lambda y, t: model.rhs(Tensor(y), t, ctx).data, y0.data, 0.0, model.t1, cfg, stats=stats)
    return model.readout(Tensor(y1), ctx).data


def adjoint_gradients(model: AceModel, x: np.ndarray, target: np.ndarray, spec: LossSpec, cfg: SolverConfig,
                      groups: Sequence[str], attention_loss: bool = False, phase: str = "adjoint",
                      loss_scale: float = 1.0) -> GradResult:
    """Loss and adjoint gradients for the parameter ``groups`` (subset of f, g, q, others)."""
    named = {f"{grp}.{n}": p for grp in groups for n, p in model.groups[grp].items()}
    fwd_stats, bwd_stats = SolverStats(), SolverStats()
    try:
        tape0, y0, ctx, y1 = _forward(model, x, cfg, fwd_stats)
    except SolverError as err:
        raise err.with_phase(f"{phase}-forward") from err

    theta_g = list(model.groups["g"].values())
    with Tape() as tape1:
        y1_t = Tensor(y1, requires_grad=True)
        pred = model.readout(y1_t, ctx)
        task = loss_h(pred, target, spec)
        loss = task
        if attention_loss and spec.lam > 0:
            loss = loss + spec.lam * regularizer(theta_g, spec.reg_norm)
        if loss_scale != 1.0:
            loss = loss * loss_scale
    sources = [y1_t] + list(named.values())
    direct = tape1.gradient(loss, sources)
    adj_y1 = direct[0]

    ode_names = [n for n in named if n.startswith(("f.", "g."))]
    ode_params = [named[n] for n in ode_names]
    sizes = [p.size for p in ode_params]
    n_y = y1.size
    n_theta = int(sum(sizes))

    def augmented(z, t):
        y = Tensor(z[:n_y], requires_grad=True)
        adj = z[n_y:2 * n_y]
        with Tape() as tape:
            dy = model.rhs(y, t, ctx)
        vjp = tape.gradient(dy, [y] + ode_params, grad_output=adj)
        out = np.empty_like(z)
        out[:n_y] = dy.data
        out[n_y:2 * n_y] = -vjp[0]
        if n_theta:
            out[2 * n_y:] = -np.concatenate([v.reshape(-1) for v in vjp[1:]])
        return out

    z1 = np.concatenate([y1, adj_y1, np.zeros(n_theta)])
    try:
        z0 = integrate(augmented, z1, model.t1, 0.0, cfg, stats=bwd_stats)
    except SolverError as err:
        raise err.with_phase(phase) from err
    adj_y0 = z0[n_y:2 * n_y]
    theta_grads = np.split(z0[2 * n_y:], np.cumsum(sizes)[:-1]) if n_theta else []

    grads = {n: g for n, g in zip(named, direct[1:])}
    for name, p, g in zip(ode_names, ode_params, theta_grads):
        grads[name] = grads[name] + g.reshape(p.shape)
    enc_names = [n for n in named if n.startswith(("q.", "others."))]
    if enc_names and y0._tape is tape0:
        enc = tape0.gradient(y0, [named[n] for n in enc_names], grad_output=adj_y0)
        for name, g in zip(enc_names, enc):
            grads[name] = grads[name] + g
    return GradResult(float(loss.data), float(task.data) * loss_scale, grads, fwd_stats, bwd_stats)


def grad_theta_f(model: AceModel, x, target, spec: LossSpec, cfg: SolverConfig) -> GradResult:
    """Gradient of L_h for theta_f, theta_q and theta_others; theta_g is held fixed."""
    return adjoint_gradients(model, x, target, spec, cfg, ("f", "q", "others"), False, "adjoint-f")


def grad_theta_g(model: AceModel, x, target, spec: LossSpec, cfg: SolverConfig) -> GradResult:
    """Gradient of L_a (task loss + lambda * ||theta_g||) for theta_g, through h(t) and a(t)."""
    return adjoint_gradients(model, x, target, spec, cfg, ("g",), True, "adjoint-g")


# oracles --------------------------------------------------------------------

def tape_gradients(model: AceModel, x, target, spec: LossSpec, cfg: SolverConfig, groups: Sequence[str],
                   attention_loss: bool = False) -> dict[str, np.ndarray]:
    """Discretize-then-optimize: backpropagate through every solver step on one tape."""
    named = {f"{grp}.{n}": p for grp in groups for n, p in model.groups[grp].items()}
    with Tape() as tape:
        y0, ctx = model.initial_state(x)
        y1 = integrate(lambda y, t: model.rhs(y, t, ctx), y0, 0.0, model.t1, cfg)
        pred = model.readout(y1, ctx)
        loss = loss_h(pred, target, spec)
        if attention_loss and spec.lam > 0:
            loss = loss + spec.lam * regularizer(list(model.groups["g"].values()), spec.reg_norm)
    grads = tape.gradient(loss, list(named.values()))
    return dict(zip(named, grads))


FD_MAX_PARAMS = 2000
FD_SOLVER = SolverConfig(method="dopri5", rtol=1e-9, atol=1e-9, max_steps=200_000)


def model_loss(model: AceModel, x, target, spec: LossSpec, cfg: SolverConfig = FD_SOLVER,
               attention_loss: bool = False) -> float:
    pred = predict(model, x, cfg)
    if attention_loss:
        return float(loss_a(pred, target, list(model.groups["g"].values()), spec).data)
    return float(loss_h(pred, target, spec).data)


def finite_difference(loss_fn: Callable[[], float], params: dict[str, Tensor], eps: float = 1e-5,
                      max_params: int = FD_MAX_PARAMS) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` by perturbing each parameter entry in place."""
    total = sum(p.size for p in params.values())
    if total > max_params:
        raise SizeError(f"finite differences over {total} parameters exceed the budget of {max_params}")
    out = {}
    for name, p in params.items():
        g = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * eps)
        out[name] = g
    return out


def finite_difference_oracle(model: AceModel, x, target, spec: LossSpec, groups: Sequence[str],
                             eps: float = 1e-5, attention_loss: bool = False,
                             cfg: SolverConfig = FD_SOLVER) -> dict[str, np.ndarray]:
    named = {f"{grp}.{n}": p for grp in groups for n, p in model.groups[grp].items()}
    return finite_difference(lambda: model_loss(model, x, target, spec, cfg, attention_loss), named, eps)


def max_relative_error(a: dict[str, np.ndarray], b: dict[str, np.ndarray], floor: float = 1e-8) -> float:
    """max |a - b| over all entries, divided by max |b| (floored)."""
    if not b:
        return 0.0
    diff = max(float(np.abs(a[k] - b[k]).max(initial=0.0)) for k in b)
    scale = max(float(np.abs(b[k]).max(initial=0.0)) for k in b)
    return diff / max(scale, floor)
