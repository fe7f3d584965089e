"""Fixed-step and adaptive explicit integrators.

States may be numpy arrays or :class:`~acenode.tensor.Tensor` objects; the
steps use only ``+`` and scalar ``*`` so a Tensor state is differentiated
through the tape (discretize-then-optimize). Right-hand sides are called as
``f(y, t)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .tensor import ConfigurationError, NumericError, Tensor

Rhs = Callable[[Any, float], Any]


class SolverError(RuntimeError):
    def __init__(self, message: str, t: float | None = None, phase: str | None = None):
        self.t = t
        self.phase = phase
        super().__init__(message)

    def with_phase(self, phase: str) -> "SolverError":
        err = type(self)(f"[{phase}] {self.args[0]}", self.t, phase)
        return err


class StepUnderflow(SolverError):
    pass


class StepBudgetExceeded(SolverError):
    pass


@dataclass
class SolverConfig:
    method: str = "dopri5"
    step_size: float = 0.1
    rtol: float = 1e-6
    atol: float = 1e-6
    max_steps: int = 10_000
    min_step: float = 1e-12
    initial_step: float | None = None

    def __post_init__(self):
        if self.method not in STEPPERS:
            raise ConfigurationError(f"unknown solver method {self.method!r}")
        if not self.step_size > 0:
            raise ConfigurationError("step_size must be > 0")
        if not (0 < self.rtol < 1 and 0 < self.atol < 1):
            raise ConfigurationError("rtol and atol must lie in (0, 1)")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")
        if not self.min_step > 0:
            raise ConfigurationError("min_step must be > 0")
        if self.initial_step is not None and not self.min_step < self.initial_step:
            raise ConfigurationError("min_step must be smaller than initial_step")


@dataclass
class SolverStats:
    nfe: int = 0
    accepted: int = 0
    rejected: int = 0

    def merge(self, other: "SolverStats") -> None:
        self.nfe += other.nfe
        self.accepted += other.accepted
        self.rejected += other.rejected


@dataclass
class Trajectory:
    times: list[float] = field(default_factory=list)
    states: list[Any] = field(default_factory=list)


def _values(y) -> np.ndarray:
    return y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)


def _eval(f: Rhs, y, t: float, stats: SolverStats | None):
    k = f(y, t)
    if stats is not None:
        stats.nfe += 1
    if np.isnan(_values(k)).any():
        raise NumericError(f"right-hand side returned NaN at t={t!r}")
    return k


def euler_step(f: Rhs, y, t: float, s: float, stats: SolverStats | None = None):
    return y + s * _eval(f, y, t, stats)


def rk4_step(f: Rhs, y, t: float, s: float, stats: SolverStats | None = None):
    k1 = _eval(f, y, t, stats)
    k2 = _eval(f, y + (s / 2) * k1, t + s / 2, stats)
    k3 = _eval(f, y + (s / 2) * k2, t + s / 2, stats)
    k4 = _eval(f, y + s * k3, t + s, stats)
    return y + (s / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))


def _combo(y, s: float, coeffs, ks):
    acc = None
    for c, k in zip(coeffs, ks):
        if c == 0.0:
            continue
        term = (s * c) * k
        acc = term if acc is None else acc + term
    return y if acc is None else y + acc


def _dopri5(f: Rhs, y, t: float, s: float, k1, stats: SolverStats | None):
    # k7 is f at the new point; reused as k1 of the next step (first-same-as-last)
    ks = [_eval(f, y, t, stats) if k1 is None else k1]
    for i in range(1, 7):
        ks.append(_eval(f, _combo(y, s, _A[i], ks), t + _C[i] * s, stats))
    y5 = _combo(y, s, _A[6], ks[:6])
    err = _combo(0.0 * ks[0], s, _E, ks)
    return y5, err, ks[6]


def dopri5_step(f: Rhs, y, t: float, s: float, stats: SolverStats | None = None):
    """One Dormand-Prince 5(4) step: ``(fifth-order solution, error estimate)``."""
    y5, err, _ = _dopri5(f, y, t, s, None, stats)
    return y5, err


def error_norm(err, y, y_new, rtol: float, atol: float) -> float:
    e, a, b = _values(err), _values(y), _values(y_new)
    scale = atol + rtol * np.maximum(np.abs(a), np.abs(b))
    if e.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((e / scale) ** 2)))


_SAFETY = 0.9
_FACTOR_MIN = 0.2
_FACTOR_MAX = 5.0


def integrate(f: Rhs, y0, t0: float, t1: float, cfg: SolverConfig | None = None,
              record: bool = False, stats: SolverStats | None = None):
    """Advance ``y0`` from ``t0`` to ``t1``; ``t1 < t0`` integrates backwards.

    Returns the terminal state, or a :class:`Trajectory` of accepted knots
    when ``record`` is true.
    """
    cfg = cfg or SolverConfig()
    stats = stats if stats is not None else SolverStats()
    traj = Trajectory([t0], [y0]) if record else None
    span = t1 - t0
    if span == 0:
        return traj if record else y0
    direction = 1.0 if span > 0 else -1.0

    if cfg.method in ("euler", "rk4"):
        step = euler_step if cfg.method == "euler" else rk4_step
        n = max(1, math.ceil(abs(span) / cfg.step_size - 1e-9))
        if n > cfg.max_steps:
            raise StepBudgetExceeded(f"{n} fixed steps exceed max_steps={cfg.max_steps}", t0)
        h = span / n
        y = y0
        for i in range(n):
            t = t0 + i * h
            y = step(f, y, t, h, stats)
            stats.accepted += 1
            if record:
                traj.times.append(t1 if i == n - 1 else t0 + (i + 1) * h)
                traj.states.append(y)
        return traj if record else y

    h = abs(cfg.initial_step) if cfg.initial_step is not None else abs(span) / 100
    t, y = t0, y0
    k1 = None
    taken = 0
    while direction * (t1 - t) > 0:
        if taken >= cfg.max_steps:
            raise StepBudgetExceeded(f"max_steps={cfg.max_steps} exceeded at t={t!r}", t)
        remaining = abs(t1 - t)
        last = h >= remaining
        s = remaining if last else h
        taken += 1
        y_new, err, k_new = _dopri5(f, y, t, direction * s, k1, stats)
        en = error_norm(err, y, y_new, cfg.rtol, cfg.atol)
        if not math.isfinite(en) or not np.isfinite(_values(y_new)).all():
            en = math.inf
        if en <= 1.0:
            t = t1 if last else t + direction * s
            y, k1 = y_new, k_new
            stats.accepted += 1
            if record:
                traj.times.append(t)
                traj.states.append(y)
            factor = _FACTOR_MAX if en == 0 else min(_FACTOR_MAX, max(_FACTOR_MIN, _SAFETY * en ** -0.2))
        else:
            stats.rejected += 1
            factor = _FACTOR_MIN if not math.isfinite(en) else min(1.0, max(_FACTOR_MIN, _SAFETY * en ** -0.2))
        h = s * factor
        if direction * (t1 - t) > 0 and h < cfg.min_step:
            raise StepUnderflow(f"step size {h:.3e} fell below min_step={cfg.min_step:.1e} at t={t!r}", t)
    return traj if record else y


STEPPERS = {"euler": euler_step, "rk4": rk4_step, "dopri5": dopri5_step}
