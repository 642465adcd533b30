"""Network container, Adam, and checkpoint tests.

The gradient checks here go through whole networks (the per-primitive
oracles live in test_autodiff); the Adam cases are hand-evaluated from
the update formula.
"""
import numpy as np
import pytest

from vop.autodiff import Tape, Var, mean_all
from vop.nn import (AdamState, Mlp, adam_init, adam_step, gradient_buffer,
                    load_mlp, mlp_copy, mlp_forward, mlp_from_json, mlp_init,
                    mlp_to_json, save_mlp)


def flatten_params(net):
    return np.concatenate([p.ravel() for p in net.weights + net.biases])


# ---------------------------------------------------------------------------
# Initialization.
# ---------------------------------------------------------------------------

def test_init_biases_zero():
    net = mlp_init([4, 10, 10, 1], seed=0)
    for b in net.biases:
        assert np.all(b == 0.0)


def test_init_deterministic():
    a = mlp_init([2, 1], seed=7)
    b = mlp_init([2, 1], seed=7)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)


def test_init_weight_bound():
    net = mlp_init([6, 20, 20, 4], seed=1)
    for w, fan_in in zip(net.weights, net.dims[:-1]):
        assert np.max(np.abs(w)) <= 1.0 / np.sqrt(fan_in)


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        mlp_init([4])
    with pytest.raises(ValueError):
        mlp_init([4, 0, 1])
    with pytest.raises(ValueError):
        mlp_init([4, 1], output_activation="sigmoid")


# ---------------------------------------------------------------------------
# Forward evaluation.
# ---------------------------------------------------------------------------

def test_forward_zero_net_zero_output():
    net = mlp_init([3, 4, 2], seed=0)
    for w in net.weights:
        w[...] = 0.0
    out = mlp_forward(net, np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(out, np.zeros(2))


def test_forward_identity_layer():
    net = Mlp(dims=(3, 3), weights=[np.eye(3)], biases=[np.zeros(3)],
              output_activation="identity")
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(mlp_forward(net, x), x)


def test_forward_matches_matrix_oracle():
    net = mlp_init([3, 5, 2], seed=42)
    rng = np.random.default_rng(0)
    x = rng.normal(size=3)
    # independent transcription: affine, rectify, affine
    h = np.maximum(net.weights[0] @ x + net.biases[0], 0.0)
    want = net.weights[1] @ h + net.biases[1]
    got = mlp_forward(net, x)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_forward_batched_matches_single():
    net = mlp_init([4, 6, 3], seed=3, output_activation="tanh")
    rng = np.random.default_rng(1)
    xs = rng.normal(size=(5, 4))
    batch = mlp_forward(net, xs)
    rows = np.stack([mlp_forward(net, x) for x in xs])
    np.testing.assert_allclose(batch, rows, atol=1e-14)


def test_forward_rejects_bad_input():
    net = mlp_init([3, 2], seed=0)
    with pytest.raises(ValueError):
        mlp_forward(net, np.zeros(4))
    with pytest.raises(ValueError):
        mlp_forward(net, np.array([1.0, np.nan, 0.0]))
    with pytest.raises(TypeError):
        mlp_forward(net, np.zeros((1, 3)), tape=Tape())


def test_taped_forward_matches_array_forward():
    net = mlp_init([5, 8, 2], seed=9, output_activation="tanh")
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 5))
    tape = Tape()
    out = mlp_forward(net, Var(x), tape=tape)
    np.testing.assert_allclose(out.data, mlp_forward(net, x), atol=1e-15)


# ---------------------------------------------------------------------------
# Whole-net gradient checks against central differences.
# ---------------------------------------------------------------------------

def fd_param_gradient(net, x, h=1e-5):
    """FD of mean(output) w.r.t. every parameter."""
    grads = []
    for p in net.weights + net.biases:
        g = np.zeros_like(p)
        flat, gf = p.ravel(), g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = mlp_forward(net, x).mean()
            flat[i] = keep - h
            down = mlp_forward(net, x).mean()
            flat[i] = keep
            gf[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def backprop_param_gradient(net, x):
    buf = gradient_buffer(net)
    tape = Tape()
    out = mean_all(tape, mlp_forward(net, Var(x), tape=tape, grad_buffer=buf))
    tape.backward(out)
    return buf.d_weights + buf.d_biases


def max_rel_err(got, want):
    num = max(np.max(np.abs(g - w)) for g, w in zip(got, want))
    den = max(max(np.max(np.abs(g)) for g in got),
              max(np.max(np.abs(w)) for w in want), 1e-6)
    return num / den


@pytest.mark.parametrize("dims,act,seed", [
    ((4, 10, 1), "identity", 0),
    ((4, 10, 1), "tanh", 1),
    ((6, 20, 20, 4), "identity", 2),
    ((6, 10, 10, 1), "tanh", 3),
])
def test_backprop_matches_fd(dims, act, seed):
    net = mlp_init(dims, output_activation=act, seed=seed)
    rng = np.random.default_rng(seed + 100)
    x = rng.normal(size=(3, dims[0]))
    got = backprop_param_gradient(net, x)
    want = fd_param_gradient(net, x)
    assert max_rel_err(got, want) < 1e-4


def test_backprop_matches_fd_many_trials():
    # the contract asks for 100 random trials; tiny nets keep this cheap
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        dims = (int(rng.integers(2, 5)), int(rng.integers(2, 8)), int(rng.integers(1, 4)))
        act = "tanh" if rng.random() < 0.5 else "identity"
        net = mlp_init(dims, output_activation=act, seed=int(rng.integers(0, 2 ** 31)))
        x = rng.normal(size=(2, dims[0]))
        worst = max(worst, max_rel_err(backprop_param_gradient(net, x),
                                       fd_param_gradient(net, x)))
    assert worst < 1e-4


def test_input_gradient_without_buffer():
    # grad_buffer=None freezes the parameters but input gradients still flow
    net = mlp_init([3, 6, 1], seed=5)
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(2, 3))
    tape = Tape()
    v = Var(x0)
    out = mean_all(tape, mlp_forward(net, v, tape=tape))
    tape.backward(out)
    assert v.grad is not None

    def f(x):
        return mlp_forward(net, x).mean()

    h = 1e-5
    fd = np.zeros_like(x0)
    flat = x0.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x0)
        flat[i] = keep - h
        down = f(x0)
        flat[i] = keep
        fd.ravel()[i] = (up - down) / (2.0 * h)
    np.testing.assert_allclose(v.grad, fd, atol=1e-8)


# ---------------------------------------------------------------------------
# Adam.
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_no_change():
    net = mlp_init([2, 3, 1], seed=0)
    before = flatten_params(net)
    state = adam_init(net)
    buf = gradient_buffer(net)
    adam_step(net, buf, state)
    np.testing.assert_array_equal(flatten_params(net), before)
    assert state.step_count == 1


def test_adam_first_step_scalar():
    # single scalar weight, constant gradient 1, lr 0.1: after bias
    # correction m_hat = v_hat = 1, so the step is lr / (1 + eps) ~ 0.1
    net = Mlp(dims=(1, 1), weights=[np.array([[0.5]])], biases=[np.zeros(1)],
              output_activation="identity")
    state = adam_init(net, learning_rate=0.1)
    buf = gradient_buffer(net)
    buf.d_weights[0][...] = 1.0
    adam_step(net, buf, state)
    assert net.weights[0][0, 0] == pytest.approx(0.5 - 0.1, abs=1e-8)


def test_adam_deterministic():
    nets = []
    for _ in range(2):
        net = mlp_init([3, 4, 1], seed=8)
        state = adam_init(net)
        buf = gradient_buffer(net)
        for g in buf.d_weights + buf.d_biases:
            g[...] = 0.25
        for _ in range(3):
            adam_step(net, buf, state)
        nets.append(flatten_params(net))
    np.testing.assert_array_equal(nets[0], nets[1])


def test_adam_rejects_nan_gradient():
    net = mlp_init([2, 2], seed=0)
    state = adam_init(net)
    buf = gradient_buffer(net)
    buf.d_weights[0][0, 0] = np.nan
    with pytest.raises(ValueError, match="layer 0 weights"):
        adam_step(net, buf, state)


def test_adam_descends_a_quadratic():
    # minimize (w - 3)^2 for a scalar; Adam should close most of the gap
    net = Mlp(dims=(1, 1), weights=[np.array([[0.0]])], biases=[np.zeros(1)],
              output_activation="identity")
    state = adam_init(net, learning_rate=0.05)
    buf = gradient_buffer(net)
    for _ in range(400):
        buf.zero()
        w = net.weights[0][0, 0]
        buf.d_weights[0][0, 0] = 2.0 * (w - 3.0)
        adam_step(net, buf, state)
    assert abs(net.weights[0][0, 0] - 3.0) < 0.05


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------

def test_json_round_trip_bit_identical():
    net = mlp_init([4, 7, 2], seed=21, output_activation="tanh")
    back = mlp_from_json(mlp_to_json(net))
    assert back.dims == net.dims
    assert back.output_activation == net.output_activation
    for a, b in zip(net.weights + net.biases, back.weights + back.biases):
        np.testing.assert_array_equal(a, b)


def test_save_load_round_trip(tmp_path):
    net = mlp_init([5, 3, 1], seed=4)
    path = tmp_path / "net.json"
    save_mlp(net, path)
    back = load_mlp(path)
    np.testing.assert_array_equal(flatten_params(net), flatten_params(back))


def test_checkpoint_rejects_bad_activation():
    net = mlp_init([2, 1], seed=0)
    doc = mlp_to_json(net).replace("identity", "softmax")
    with pytest.raises(ValueError):
        mlp_from_json(doc)


def test_mlp_copy_is_independent():
    net = mlp_init([2, 2], seed=0)
    dup = mlp_copy(net)
    dup.weights[0][0, 0] += 1.0
    assert net.weights[0][0, 0] != dup.weights[0][0, 0]
