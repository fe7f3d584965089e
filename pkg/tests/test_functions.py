import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acenode import tensor as T
from acenode.checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from acenode.functions import (OdeFunction, eval_conv_block, eval_gru_cell, eval_mlp_tanh, init_conv_block,
                               init_gru_cell, init_mlp_tanh, parameter_count)
from acenode.solvers import SolverConfig, integrate
from acenode.tensor import ConfigurationError, DimensionError, Tensor

from conftest import numeric_grad, rel_err, tape_grads


def param_grads_vs_fd(params, scalar, tol):
    names = sorted(params)
    _, grads = tape_grads(lambda *arrs: scalar(dict(zip(names, arrs))), *[params[n].data for n in names])
    for name, g in zip(names, grads):
        def fn(x, name=name):
            p = {n: Tensor(params[n].data) for n in names}
            p[name] = Tensor(x)
            return float(scalar(p).data)
        fd = numeric_grad(fn, params[name].data)
        # biases ahead of a per-channel GroupNorm have exactly zero gradient
        assert np.abs(g - fd).max() <= tol * max(np.abs(fd).max(), 1e-2), name


# conv block --------------------------------------------------------------

@pytest.mark.parametrize("layers", [2, 3])
def test_conv_block_zero_weights_zero_output(rng, layers):
    p = init_conv_block(4, layers, rng, groups=2)
    for name in p:
        if "conv" in name or name.endswith("bias"):
            p[name] = Tensor(np.zeros(p[name].shape))
    out = eval_conv_block(p, Tensor(rng.standard_normal((4, 5, 5))), 0.3, layers)
    np.testing.assert_array_equal(out.data, 0.0)


def test_conv_block_parameter_count_by_enumeration(rng):
    # norm1 (2*64), conv2 (64*65*9 + 64), norm2 (2*64), conv3 (64*64*9 + 64), norm3 (2*64)
    assert parameter_count(init_conv_block(64, 3, rng)) == 74816
    assert parameter_count(init_conv_block(64, 2, rng)) == 128 + 64 * 65 * 9 + 64 + 128


@pytest.mark.parametrize("layers", [2, 3])
def test_conv_block_gradients(rng, layers):
    p = init_conv_block(2, layers, rng)
    for name in p:
        p[name] = Tensor(p[name].data + 0.1 * rng.standard_normal(p[name].shape))
    x, w = rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))
    param_grads_vs_fd(p, lambda q: T.tsum(eval_conv_block(q, Tensor(x), 0.5, layers) * Tensor(w)), 1e-4)
    _, (gx,) = tape_grads(lambda xx: T.tsum(eval_conv_block(p, xx, 0.5, layers) * Tensor(w)), x)
    fd = numeric_grad(lambda xx: float((eval_conv_block(p, Tensor(xx), 0.5, layers).data * w).sum()), x)
    assert rel_err(gx, fd) < 1e-4


def test_conv_block_time_channel_matters(rng):
    p = init_conv_block(2, 2, rng)
    x = Tensor(rng.standard_normal((2, 4, 4)))
    assert not np.allclose(eval_conv_block(p, x, 0.0, 2).data, eval_conv_block(p, x, 1.0, 2).data)


def test_conv_block_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        eval_conv_block(init_conv_block(4, 3, rng), Tensor(np.zeros((3, 4, 4))), 0.0, 3)


def test_conv_block_layer_count(rng):
    with pytest.raises(ConfigurationError):
        init_conv_block(4, 4, rng)


# tanh MLP ----------------------------------------------------------------

def test_mlp_zero_weights_gives_bias(rng):
    p = init_mlp_tanh([3, 5, 3], rng)
    p = {k: Tensor(np.zeros(v.shape)) for k, v in p.items()}
    p["linear1.bias"] = Tensor(np.array([0.1, -0.2, 0.3]))
    np.testing.assert_allclose(eval_mlp_tanh(p, Tensor([[1.0, 2.0, 3.0]]), 0.7).data, [[0.1, -0.2, 0.3]])


def test_mlp_single_identity_layer(rng):
    # identity on the state, zero weight on the time column
    w = np.vstack([np.eye(2), np.zeros((1, 2))])
    p = {"linear0.weight": Tensor(w), "linear0.bias": Tensor(np.zeros(2))}
    x = np.array([[0.5, -1.5]])
    np.testing.assert_array_equal(eval_mlp_tanh(p, Tensor(x), 9.0).data, x)
    np.testing.assert_allclose(eval_mlp_tanh(p, Tensor(x), 9.0, final_linear=False).data, np.tanh(x))


def test_mlp_gradients(rng):
    p = init_mlp_tanh([3, 6, 6, 3], rng)
    x, w = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    param_grads_vs_fd(p, lambda q: T.tsum(eval_mlp_tanh(q, Tensor(x), 0.2) * Tensor(w)), 1e-5)


@pytest.mark.parametrize("widths", [[3], [3, 4, 2]])
def test_mlp_width_validation(rng, widths):
    with pytest.raises(ConfigurationError):
        init_mlp_tanh(widths, rng)


def test_mlp_state_size_mismatch(rng):
    with pytest.raises(ConfigurationError):
        eval_mlp_tanh(init_mlp_tanh([3, 4, 3], rng), Tensor(np.zeros((1, 2))), 0.0)


# GRU cell ----------------------------------------------------------------

def zero_gru(d):
    return {k: Tensor(np.zeros(v.shape)) for k, v in init_gru_cell(d, np.random.default_rng(0)).items()}


def test_gru_zero_parameters_halves_state():
    x = np.array([[0.4, -0.8, 0.2]])
    np.testing.assert_allclose(eval_gru_cell(zero_gru(3), Tensor(x), 0.0).data, -0.5 * x, rtol=1e-15)


def test_gru_fixed_point():
    assert np.all(eval_gru_cell(zero_gru(2), Tensor(np.zeros((1, 2))), 0.0).data == 0.0)
    # c(x) = tanh(b_c) when W_c = 0; choose x = tanh(b_c)
    p = zero_gru(2)
    p["b_c"] = Tensor(np.array([0.3, -0.6]))
    x = Tensor(np.tanh([[0.3, -0.6]]))
    np.testing.assert_allclose(eval_gru_cell(p, x, 0.0).data, 0.0, atol=1e-16)


def test_gru_trajectory_stays_bounded(rng):
    p = init_gru_cell(4, rng)
    p = {k: Tensor(3 * v.data + (rng.standard_normal(v.shape) if k.startswith("b") else 0)) for k, v in p.items()}
    traj = integrate(lambda y, t: eval_gru_cell(p, Tensor(y[None]), t).data[0], rng.uniform(-0.99, 0.99, 4),
                     0.0, 10.0, SolverConfig(rtol=1e-8, atol=1e-8), record=True)
    assert np.all(np.abs(np.stack(traj.states)) < 1.0)


def test_gru_driving_input_gradients(rng):
    p = init_gru_cell(3, rng, input_dim=2)
    x, u, w = rng.standard_normal((2, 3)), rng.standard_normal((2, 2)), rng.standard_normal((2, 3))
    param_grads_vs_fd(p, lambda q: T.tsum(eval_gru_cell(q, Tensor(x), 0.0, Tensor(u)) * Tensor(w)), 1e-5)


def test_gru_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        eval_gru_cell(init_gru_cell(3, rng), Tensor(np.zeros((1, 2))), 0.0)


# wrapper -----------------------------------------------------------------

@pytest.mark.parametrize("make, x", [
    (lambda r: OdeFunction.conv_block(2, 4, 4, 3, r), np.ones((3, 2, 4, 4))),
    (lambda r: OdeFunction.mlp_tanh([3, 8, 3], r), np.ones((5, 3))),
    (lambda r: OdeFunction.gru_cell(3, r), np.ones((5, 3))),
    (lambda r: OdeFunction.zero((5, 3)), np.ones((5, 3))),
])
def test_shape_closure(rng, make, x):
    fn = make(rng)
    assert fn.in_shape == fn.out_shape
    assert fn(Tensor(x), 0.1).shape == x.shape


def test_parameter_count_is_stable():
    counts = {OdeFunction.gru_cell(5, np.random.default_rng(s), input_dim=5).parameter_count() for s in range(3)}
    assert counts == {3 * (25 + 25 + 5)}
    assert OdeFunction.zero((3,)).parameter_count() == 0


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        OdeFunction("lstm", {}, (2,))


# checkpoint --------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    tensors = {"f.W": rng.standard_normal((3, 4)), "g.b": np.array([np.pi, -0.0, 1e-300]),
               "scalar": np.array(2.5), "empty": np.zeros((0, 2))}
    save_checkpoint(tmp_path / "m.ckpt", tensors)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.astype(np.float64).tobytes()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(allow_nan=False), min_size=0, max_size=12))
def test_checkpoint_round_trip_property(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("ck") / "v.ckpt"
    save_checkpoint(path, {"v": np.array(values, dtype=np.float64)})
    assert load_checkpoint(path)["v"].tobytes() == np.array(values, dtype=np.float64).tobytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(tmp_path / "x")


def test_checkpoint_truncation(tmp_path, rng):
    save_checkpoint(tmp_path / "m", {"weight": rng.standard_normal(10)})
    raw = (tmp_path / "m").read_bytes()
    (tmp_path / "payload").write_bytes(raw[:-8])
    with pytest.raises(CheckpointFormatError, match="past end"):
        load_checkpoint(tmp_path / "payload")
    (tmp_path / "header").write_bytes(raw[:14])
    with pytest.raises(CheckpointFormatError, match="truncated header"):
        load_checkpoint(tmp_path / "header")


def test_checkpoint_version(tmp_path):
    save_checkpoint(tmp_path / "m", {})
    raw = bytearray((tmp_path / "m").read_bytes())
    raw[4] = 9
    (tmp_path / "m").write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(tmp_path / "m")
