"""Three-way gradient comparison: adjoint vs finite differences vs tape."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import (FD_SOLVER, LossSpec, finite_difference_oracle, grad_theta_f, grad_theta_g,
                      max_relative_error, tape_gradients)
from .model import AceModel
from .solvers import SolverConfig

THRESHOLD = 1e-3
MAX_TOY_DIM = 4
ADJOINT_SOLVER = SolverConfig(method="dopri5", rtol=1e-9, atol=1e-9, max_steps=200_000)
TAPE_SOLVER = SolverConfig(method="rk4", step_size=1e-2)


@dataclass
class GroupCheck:
    group: str
    size: int
    vs_fd: float
    vs_tape: float

    @property
    def worst(self) -> float:
        return max(self.vs_fd, self.vs_tape)


@dataclass
class GradcheckReport:
    checks: list[GroupCheck] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    threshold: float = THRESHOLD

    @property
    def passed(self) -> bool:
        return all(c.worst < self.threshold for c in self.checks)

    def lines(self) -> list[str]:
        out = [f"{c.group:>2}  n={c.size:<5d} adjoint-vs-fd={c.vs_fd:.3e}  adjoint-vs-tape={c.vs_tape:.3e}  "
               f"{'ok' if c.worst < self.threshold else 'FAIL'}" for c in self.checks]
        out += [f"warning: {w}" for w in self.warnings]
        out.append(f"gradcheck {'PASS' if self.passed else 'FAIL'} (threshold {self.threshold:g})")
        return out


def toy_dim(model: AceModel) -> int:
    if model.task == "mnist":
        return int(model.meta["channels"]) * int(model.meta["side"]) ** 2
    return int(model.meta["state_dim"])


def run_gradcheck(model: AceModel, x: np.ndarray, target: np.ndarray, spec: LossSpec,
                  adjoint_solver: SolverConfig = ADJOINT_SOLVER, tape_solver: SolverConfig = TAPE_SOLVER,
                  fd_solver: SolverConfig = FD_SOLVER, eps: float = 1e-5, adjoint_f=grad_theta_f,
                  adjoint_g=grad_theta_g, threshold: float = THRESHOLD) -> GradcheckReport:
    """Compare gradients for the f, g and q parameter groups.

    ``adjoint_f`` / ``adjoint_g`` can be swapped for instrumented versions
    (a sign-flipped adjoint must make the check fail).
    """
    report = GradcheckReport(threshold=threshold)
    for group in ("f", "g", "q"):
        params = model.groups[group]
        size = int(sum(p.size for p in params.values()))
        if size == 0:
            continue
        attention_loss = group == "g"
        adjoint = (adjoint_g if attention_loss else adjoint_f)(model, x, target, spec, adjoint_solver).grads
        adjoint = {k: v for k, v in adjoint.items() if k.startswith(group + ".")}
        fd = finite_difference_oracle(model, x, target, spec, (group,), eps, attention_loss, fd_solver)
        tape = tape_gradients(model, x, target, spec, tape_solver, (group,), attention_loss)
        report.checks.append(GroupCheck(group, size, max_relative_error(adjoint, fd),
                                        max_relative_error(adjoint, tape)))
    if not report.checks:
        report.warnings.append("model has no ODE or generator parameters; nothing to compare")
    return report
