import math

import numpy as np
import pytest

from acenode import adjoint as adjoint_module
from acenode import tensor as T
from acenode.adjoint import (DataError, LossSpec, SizeError, adjoint_gradients, finite_difference,
                             finite_difference_oracle, grad_theta_f, grad_theta_g, loss_a, loss_h,
                             max_relative_error, predict, regularizer, regularizer_grad, tape_gradients)
from acenode.model import build_toy
from acenode.solvers import SolverConfig, StepBudgetExceeded
from acenode.tensor import ConfigurationError, Tape, Tensor

ADJ = SolverConfig(rtol=1e-10, atol=1e-10, max_steps=200_000)
TAPE_FINE = SolverConfig(method="rk4", step_size=1e-3)


@pytest.fixture
def batch():
    r = np.random.default_rng(7)
    return r.standard_normal((3, 2)), r.standard_normal((3, 2))


# losses ------------------------------------------------------------------

def test_mse_examples():
    spec = LossSpec("mse")
    x = np.array([[0.3, -1.0]])
    assert loss_h(x, x, spec).data == 0.0
    assert loss_h(np.array([0.0, 2.0]), np.array([1.0, 0.0]), spec).data == 2.5


def test_cross_entropy_uniform_logits():
    value = loss_h(np.zeros((4, 10)), np.array([0, 3, 9, 5]), LossSpec("cross_entropy")).data
    assert value == pytest.approx(math.log(10), abs=1e-15)


def test_cross_entropy_large_logits_stay_finite():
    value = loss_h(np.array([[1000.0, 0.0]]), np.array([1]), LossSpec("cross_entropy")).data
    assert value == pytest.approx(1000.0)


@pytest.mark.parametrize("labels", [np.array([0, 10]), np.array([-1, 0]), np.array([0])])
def test_cross_entropy_label_errors(labels):
    with pytest.raises(DataError):
        loss_h(np.zeros((2, 10)), labels, LossSpec("cross_entropy"))


def test_mse_shape_error():
    with pytest.raises(DataError):
        loss_h(np.zeros((2, 3)), np.zeros((3, 2)), LossSpec())


def test_loss_a_examples():
    pred, target = np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]])
    task = loss_h(pred, target, LossSpec()).data
    theta = [Tensor([3.0, -4.0])]
    assert loss_a(pred, target, theta, LossSpec(lam=0.0)).data == task
    assert loss_a(pred, target, theta, LossSpec(reg_norm="L2", lam=0.01)).data == pytest.approx(task + 0.05, abs=1e-15)
    assert loss_a(pred, target, [Tensor(np.zeros(3))], LossSpec(reg_norm="L1", lam=0.5)).data == task


@pytest.mark.parametrize("kwargs", [{"task": "hinge"}, {"reg_norm": "L3"}, {"lam": -0.1}])
def test_loss_spec_validation(kwargs):
    with pytest.raises(ConfigurationError):
        LossSpec(**kwargs)


@pytest.mark.parametrize("norm", ["L1", "L2", "L2sq"])
def test_regularizer_gradient_closed_form(norm):
    values = [np.array([0.0, -1.5, 2.0]), np.array([[0.5], [0.0]])]
    params = [T.parameter(v.copy()) for v in values]
    with Tape() as tape:
        r = regularizer(params, norm)
    got = tape.gradient(r, params)
    for g, expected in zip(got, regularizer_grad(values, norm)):
        np.testing.assert_array_equal(g, expected)


def test_regularizer_subgradients_at_zero():
    zeros = [T.parameter(np.zeros(3))]
    for norm in ("L1", "L2"):
        with Tape() as tape:
            r = regularizer(zeros, norm)
        assert r.data == 0.0
        np.testing.assert_array_equal(tape.gradient(r, zeros)[0], 0.0)


# finite-difference oracle ------------------------------------------------

def test_finite_difference_constant_loss():
    p = {"w": T.parameter(np.array([1.0, 2.0]))}
    np.testing.assert_array_equal(finite_difference(lambda: 4.0, p)["w"], 0.0)


def test_finite_difference_square():
    p = {"theta": T.parameter(np.array([3.0]))}
    g = finite_difference(lambda: float(p["theta"].data[0] ** 2), p)["theta"]
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_difference_budget():
    with pytest.raises(SizeError):
        finite_difference(lambda: 0.0, {"w": T.parameter(np.zeros(2001))})


def test_finite_difference_matches_tape_on_op_composition(rng):
    w = T.parameter(rng.standard_normal((3, 3)))
    x = rng.standard_normal((4, 3))

    def build():
        return T.tsum(T.softmax_rows(T.tanh(Tensor(x) @ w)) * T.sigmoid(Tensor(x) @ w))

    with Tape() as tape:
        out = build()
    (g,) = tape.gradient(out, [w])
    fd = finite_difference(lambda: float(build().data), {"w": w})["w"]
    assert max_relative_error({"w": g}, {"w": fd}) < 1e-6


def test_max_relative_error():
    assert max_relative_error({"a": np.array([1.0, 2.1])}, {"a": np.array([1.0, 2.0])}) == pytest.approx(0.05)
    assert max_relative_error({}, {}) == 0.0


# adjoint gradients -------------------------------------------------------

@pytest.mark.parametrize("attention", ["none", "pairwise", "elementwise"])
def test_grad_theta_f_matches_oracles(batch, attention):
    x, y = batch
    model = build_toy(attention, np.random.default_rng(3))
    spec = LossSpec()
    adj = grad_theta_f(model, x, y, spec, ADJ).grads
    groups = [grp for grp in ("f", "q") if model.groups[grp]]
    fd = finite_difference_oracle(model, x, y, spec, groups)
    tape = tape_gradients(model, x, y, spec, TAPE_FINE, groups)
    assert set(adj) == set(fd)
    assert max_relative_error(adj, fd) < 1e-4
    assert max_relative_error(adj, tape) < 1e-3


@pytest.mark.parametrize("attention, g_kind", [("pairwise", "linear"), ("pairwise", "gru"), ("elementwise", "linear")])
@pytest.mark.parametrize("norm", ["L1", "L2"])
def test_grad_theta_g_matches_oracles(batch, attention, g_kind, norm):
    x, y = batch
    model = build_toy(attention, np.random.default_rng(4), g_kind=g_kind)
    spec = LossSpec(reg_norm=norm, lam=0.01)
    adj = grad_theta_g(model, x, y, spec, ADJ).grads
    fd = finite_difference_oracle(model, x, y, spec, ("g",), attention_loss=True)
    tape = tape_gradients(model, x, y, spec, TAPE_FINE, ("g",), attention_loss=True)
    assert max_relative_error(adj, fd) < 1e-4
    assert max_relative_error(adj, tape) < 1e-3


def test_grad_theta_g_reaches_through_hidden_state(batch):
    # g only moves the logits; its gradient is nonzero solely via h(t)
    x, y = batch
    model = build_toy("pairwise", np.random.default_rng(5))
    grads = grad_theta_g(model, x, y, LossSpec(), ADJ).grads
    assert max(np.abs(v).max() for v in grads.values()) > 1e-6


def test_detached_task_leaves_regularizer_gradient(batch):
    x, _ = batch
    model = build_toy("pairwise", np.random.default_rng(6))
    # target = own prediction: the task term sits at its minimum and contributes no gradient
    target = predict(model, x, ADJ)
    spec = LossSpec(reg_norm="L2sq", lam=0.3)
    grads = grad_theta_g(model, x, target, spec, ADJ).grads
    for name, p in model.groups["g"].items():
        np.testing.assert_allclose(grads[f"g.{name}"], 0.3 * 2 * p.data, rtol=0, atol=1e-12)


def test_doubling_the_loss_doubles_gradients(batch):
    x, y = batch
    model = build_toy("pairwise", np.random.default_rng(8))
    # fixed steps: adaptive step control would see the scaled adjoint through atol
    cfg = SolverConfig(method="rk4", step_size=0.05)
    one = adjoint_gradients(model, x, y, LossSpec(), cfg, ("f", "g", "q"))
    two = adjoint_gradients(model, x, y, LossSpec(), cfg, ("f", "g", "q"), loss_scale=2.0)
    assert two.loss == 2 * one.loss
    for k in one.grads:
        np.testing.assert_allclose(two.grads[k], 2 * one.grads[k], rtol=1e-12, atol=0)


def test_grad_theta_f_ignores_generator_g(batch):
    x, y = batch
    model = build_toy("pairwise", np.random.default_rng(9))
    assert not any(k.startswith("g.") for k in grad_theta_f(model, x, y, LossSpec(), ADJ).grads)
    assert all(k.startswith("g.") for k in grad_theta_g(model, x, y, LossSpec(), ADJ).grads)


def test_gradients_leave_parameters_untouched(batch):
    x, y = batch
    model = build_toy("pairwise", np.random.default_rng(10))
    before = model.state_dict()
    grad_theta_f(model, x, y, LossSpec(), ADJ)
    grad_theta_g(model, x, y, LossSpec(lam=0.1), ADJ)
    finite_difference_oracle(model, x, y, LossSpec(), ("q",))
    after = model.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_solver_stats_recorded(batch):
    x, y = batch
    res = grad_theta_f(build_toy("none", np.random.default_rng(0)), x, y, LossSpec(), ADJ)
    assert res.forward_stats.nfe > 0 and res.backward_stats.nfe > 0


@pytest.mark.parametrize("fn, tag", [(grad_theta_f, "adjoint-f"), (grad_theta_g, "adjoint-g")])
def test_solver_failure_carries_phase(batch, monkeypatch, fn, tag):
    x, y = batch
    model = build_toy("pairwise", np.random.default_rng(0))
    with pytest.raises(StepBudgetExceeded) as info:
        fn(model, x, y, LossSpec(), SolverConfig(rtol=1e-10, atol=1e-10, max_steps=2))
    assert info.value.phase == f"{tag}-forward"

    real = adjoint_module.integrate

    def reverse_fails(f, y0, t0, t1, cfg=None, **kw):
        if t1 < t0:
            raise StepBudgetExceeded("budget", 0.5)
        return real(f, y0, t0, t1, cfg, **kw)

    monkeypatch.setattr(adjoint_module, "integrate", reverse_fails)
    with pytest.raises(StepBudgetExceeded) as info:
        fn(model, x, y, LossSpec(), ADJ)
    assert info.value.phase == tag and info.value.t == 0.5
