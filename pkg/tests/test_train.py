import importlib
import io
import json

import numpy as np
import pytest

from acenode.adjoint import LossSpec
from acenode.data import Dataset, synth_crossing
from acenode.model import build_model, build_toy
from acenode.solvers import SolverConfig, StepBudgetExceeded
from acenode.tensor import Tensor
from acenode.train import Adam, TrainingAborted, TrainRun, evaluate, metric_name, train

train_module = importlib.import_module("acenode.train")
FAST = SolverConfig(method="rk4", step_size=0.25)


def linear_toy_data(n=48, seed=0):
    """y = M x for a fixed rotation-like M; a linear flow can fit it."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2))
    m = np.array([[0.8, 0.5], [-0.4, 1.1]])
    idx = np.arange(n)
    return Dataset(x, x @ m.T, {"train": idx[: n // 2], "val": idx[n // 2: 3 * n // 4], "test": idx[3 * n // 4:]})


def toy_run(attention="pairwise", seed=0, **kw):
    model = build_toy(attention, np.random.default_rng(seed))
    kw.setdefault("solver", FAST)
    return TrainRun(model, LossSpec(), **kw)


# optimizer ---------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    # bias-corrected first step is lr * sign(g) up to eps
    p = {"w": Tensor(np.array([1.0, -2.0, 0.5]))}
    Adam(lr=0.1, eps=0.0).step(p, {"w": np.array([3.0, -0.01, 2.0])})
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9, 0.4], rtol=1e-14)


def test_adam_matches_reference_recurrence():
    p = {"w": Tensor(np.array([0.0]))}
    opt = Adam(lr=0.01)
    grads = [0.5, -1.0, 2.0]
    w, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        opt.step(p, {"w": np.array([g])})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert p["w"].data[0] == pytest.approx(w, rel=1e-14)


def test_adam_leaves_unlisted_parameters():
    p = {"a": Tensor(np.ones(2)), "b": Tensor(np.ones(2))}
    Adam(lr=0.5).step(p, {"a": np.ones(2)})
    np.testing.assert_array_equal(p["b"].data, 1.0)


# loop --------------------------------------------------------------------

def test_zero_iterations_returns_initial_parameters():
    run = toy_run(max_iter=0)
    before = run.model.state_dict()
    train(run, linear_toy_data())
    assert run.history == [] and run.best_epoch == -1
    assert all(before[k].tobytes() == v.tobytes() for k, v in run.model.state_dict().items())


def test_training_loss_decreases_on_linear_toy():
    run = toy_run("none", lr=1e-2, max_iter=5, batch_size=64)
    train(run, linear_toy_data())
    losses = [r["loss_h"] for r in run.history]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_phases_freeze_the_other_group(monkeypatch):
    run = toy_run(max_iter=1, batch_size=8)
    snapshots = {}
    real_phase = train_module._run_phase

    def spy(run_, x, y, rng, grad_fn, phase, stats):
        before = run_.model.state_dict()
        out = real_phase(run_, x, y, rng, grad_fn, phase, stats)
        snapshots[phase] = (before, run_.model.state_dict())
        return out

    monkeypatch.setattr(train_module, "_run_phase", spy)
    train(run, linear_toy_data())
    before, after = snapshots["f"]
    assert all(before[k].tobytes() == after[k].tobytes() for k in before if k.startswith("g."))
    assert any(before[k].tobytes() != after[k].tobytes() for k in before if k.startswith("f."))
    before, after = snapshots["g"]
    assert all(before[k].tobytes() == after[k].tobytes() for k in before if not k.startswith("g."))
    assert any(before[k].tobytes() != after[k].tobytes() for k in before if k.startswith("g."))


def test_best_checkpoint_dominates_history():
    data = linear_toy_data()
    run = toy_run(lr=5e-2, max_iter=6, batch_size=12)
    train(run, data)
    vals = [r["val_value"] for r in run.history]
    assert run.best_score == min(vals)
    assert run.best_epoch == vals.index(min(vals))
    assert evaluate(run.model, data, "val", FAST).value == run.best_score


def test_best_only_replaced_on_strict_improvement():
    run = toy_run()
    assert run.improved(1.0)
    run.best_score = 1.0
    assert not run.improved(1.0) and run.improved(0.999)


def test_metric_direction():
    assert metric_name(build_toy("none", np.random.default_rng(0))) == "mse"
    crossing = build_model("crossing", "node", np.random.default_rng(0), hidden=4)
    assert metric_name(crossing) == "accuracy"
    run = TrainRun(crossing, LossSpec(), FAST, stop_at=1.0)
    run.best_score = 1.0
    assert run.reached_target() and not run.improved(1.0)


def test_same_seed_same_history():
    def once():
        out = io.StringIO()
        train(toy_run(max_iter=2, batch_size=10, seed=3), linear_toy_data(), metrics_out=out)
        return out.getvalue()

    assert once() == once()


def test_metrics_records_and_timings():
    metrics, timings = io.StringIO(), io.StringIO()
    train(toy_run(max_iter=2, batch_size=24), linear_toy_data(), metrics, timings, extra_splits=("test",))
    records = [json.loads(line) for line in metrics.getvalue().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1]
    assert {"loss_h", "loss_a", "val_value", "test_mse", "best_value", "nfe_forward", "nfe_backward"} <= set(records[0])
    assert all("wall_clock" not in k for r in records for k in r)
    assert [json.loads(line)["epoch"] for line in timings.getvalue().splitlines()] == [0, 1]


def test_stop_at_ends_early():
    data = synth_crossing(40, 0.05, 0)
    model = build_model("crossing", "augmented_node", np.random.default_rng(0), hidden=8)
    run = TrainRun(model, LossSpec(), FAST, lr=3e-2, max_iter=50, batch_size=24, stop_at=0.0)
    train(run, data)
    assert len(run.history) == 1


def test_non_finite_loss_aborts():
    data = linear_toy_data()
    data.targets[data.splits["train"][0]] = np.nan
    with pytest.raises(TrainingAborted, match="non-finite"):
        train(toy_run("none", max_iter=1, batch_size=4), data)


def test_solver_failure_aborts_with_context():
    run = toy_run("none", max_iter=1, solver=SolverConfig(rtol=1e-10, atol=1e-10, max_steps=1))
    with pytest.raises(TrainingAborted, match="epoch 0, phase f") as info:
        train(run, linear_toy_data())
    assert isinstance(info.value.__cause__, StepBudgetExceeded)
