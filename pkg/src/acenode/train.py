"""Alternating training of the hidden-state and attention ODEs.

Each iteration runs one epoch of theta_f / theta_q / theta_others updates on
L_h with theta_g frozen, then one epoch of theta_g updates on L_a with the
rest frozen, then validates and keeps the best parameters seen so far.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .adjoint import GradResult, LossSpec, grad_theta_f, grad_theta_g, predict
from .data import Dataset
from .metrics import MetricReport, accuracy, mse, sign_accuracy
from .model import AceModel
from .solvers import SolverConfig, SolverError, SolverStats
from .tensor import NumericError


class TrainingAborted(RuntimeError):
    pass


class Adam:
    """Adaptive moment estimation with per-parameter state keyed by name."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            t = self.t.get(name, 0) + 1
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            self.m[name], self.v[name], self.t[name] = m, v, t


def metric_name(model: AceModel) -> str:
    return "accuracy" if model.task in ("crossing", "mnist") else "mse"


def higher_is_better(name: str) -> bool:
    return name == "accuracy"


def score(model: AceModel, pred: np.ndarray, target: np.ndarray) -> float:
    if model.task == "crossing":
        return sign_accuracy(pred, target)
    if model.task == "mnist":
        return accuracy(pred, target)
    return mse(pred, target)


def evaluate(model: AceModel, data: Dataset, split: str, solver: SolverConfig, batch_size: int = 256,
             stats: SolverStats | None = None) -> MetricReport:
    x, y = data.subset(split)
    preds = [predict(model, x[i:i + batch_size], solver, stats) for i in range(0, len(x), batch_size)]
    pred = np.concatenate(preds) if preds else np.zeros((0,))
    name = metric_name(model)
    return MetricReport(name, score(model, pred, y), len(x), split)


@dataclass
class TrainRun:
    model: AceModel
    spec: LossSpec
    solver: SolverConfig
    lr: float = 1e-2
    batch_size: int = 128
    max_iter: int = 10
    seed: int = 0
    stop_at: float | None = None
    optimizer: Adam | None = None
    epoch: int = 0
    best_state: dict[str, np.ndarray] | None = None
    best_score: float | None = None
    best_epoch: int = -1
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = Adam(self.lr)
        if self.best_state is None:
            self.best_state = self.model.state_dict()

    def reached_target(self) -> bool:
        if self.stop_at is None or self.best_score is None:
            return False
        if higher_is_better(metric_name(self.model)):
            return self.best_score >= self.stop_at
        return self.best_score <= self.stop_at

    def improved(self, value: float) -> bool:
        if self.best_score is None:
            return True
        if higher_is_better(metric_name(self.model)):
            return value > self.best_score
        return value < self.best_score


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _run_phase(run: TrainRun, x, y, rng, grad_fn: Callable[..., GradResult], phase: str, stats: dict):
    params = run.model.named_parameters()
    losses, weights = [], []
    for idx in _batches(len(x), run.batch_size, rng):
        try:
            res = grad_fn(run.model, x[idx], y[idx], run.spec, run.solver)
        except SolverError as err:
            raise TrainingAborted(f"epoch {run.epoch}, phase {phase}: {err}") from err
        except NumericError as err:
            raise TrainingAborted(f"epoch {run.epoch}, phase {phase}: non-finite values ({err})") from err
        if not math.isfinite(res.loss) or not all(np.isfinite(g).all() for g in res.grads.values()):
            raise TrainingAborted(f"epoch {run.epoch}, phase {phase}: non-finite loss {res.loss} "
                                  f"(batch of {len(idx)}, nfe forward {res.forward_stats.nfe})")
        run.optimizer.step(params, res.grads)
        losses.append(res.loss)
        weights.append(len(idx))
        stats["nfe_forward"] += res.forward_stats.nfe
        stats["nfe_backward"] += res.backward_stats.nfe
    return float(np.average(losses, weights=weights))


def train(run: TrainRun, data: Dataset, metrics_out: TextIO | None = None, timing_out: TextIO | None = None,
          extra_splits: tuple[str, ...] = (), eval_solver: SolverConfig | None = None) -> TrainRun:
    """Alternating training; returns ``run`` with the best parameters loaded into the model.

    Stops after ``run.max_iter`` epochs, or earlier once the best validation
    value reaches ``run.stop_at``.
    """
    x, y = data.subset("train")
    rng = np.random.default_rng(run.seed)
    has_g = bool(run.model.groups["g"])
    name = metric_name(run.model)
    eval_solver = eval_solver or run.solver
    while run.epoch < run.max_iter:
        start = time.perf_counter()
        stats = {"nfe_forward": 0, "nfe_backward": 0}
        loss_h = _run_phase(run, x, y, rng, grad_theta_f, "f", stats)
        loss_a = _run_phase(run, x, y, rng, grad_theta_g, "g", stats) if has_g else None
        try:
            val = evaluate(run.model, data, "val", eval_solver).value
            extra = {f"{s}_{name}": evaluate(run.model, data, s, eval_solver).value for s in extra_splits}
        except SolverError as err:
            raise TrainingAborted(f"epoch {run.epoch}, validation: {err}") from err
        if run.improved(val):
            run.best_score = val
            run.best_state = run.model.state_dict()
            run.best_epoch = run.epoch
        record = {"epoch": run.epoch, "loss_h": loss_h, "loss_a": loss_a, "val_metric": name,
                  "val_value": val, **extra, "best_value": run.best_score, "best_epoch": run.best_epoch,
                  **stats}
        run.history.append(record)
        if metrics_out is not None:
            metrics_out.write(json.dumps(record) + "\n")
            metrics_out.flush()
        if timing_out is not None:
            timing_out.write(json.dumps({"epoch": run.epoch, "wall_clock_s": time.perf_counter() - start}) + "\n")
        run.epoch += 1
        if run.reached_target():
            break
    run.model.load_state_dict(run.best_state)
    return run
