import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ergodic_mfc import autodiff as ad
from ergodic_mfc import model, net
from ergodic_mfc.net import NetworkArch

TWO_PI = 2 * np.pi


def random_theta(arch, rng, scale=1.0):
    return rng.normal(scale=scale, size=arch.n_params)


def fd_jet(arch, theta, x, h=1e-4):
    f = lambda p: net.eval_value(arch, theta, p)  # noqa: E731
    grad = np.zeros_like(x)
    lap = -2 * x.shape[1] * f(x)
    for i in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[i] = h
        fp, fm = f(x + e), f(x - e)
        grad[:, i] = (fp - fm) / (2 * h)
        lap = lap + fp + fm
    return grad, lap / h**2


def rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


# --- architecture and initialization ---------------------------------------

def test_arch_validation():
    with pytest.raises(ValueError):
        NetworkArch((1, 5, 2))
    with pytest.raises(ValueError):
        NetworkArch((1, 5, 5, 1), activation="sin_periodic")
    with pytest.raises(ValueError):
        NetworkArch((1, 5, 1), activation="relu")
    with pytest.raises(ValueError):
        NetworkArch((1, 5, 1), gamma1=0.0)
    assert NetworkArch((2, 3, 1)).embedding == "trig"
    assert NetworkArch((2, 3, 1), activation="sin_periodic").embedding == "raw"


def test_parameter_count():
    assert NetworkArch((1, 20, 1)).n_params == 20 * 2 + 20 + 20 + 1
    assert NetworkArch((3, 4, 5, 1)).n_params == (4 * 6 + 4) + (5 * 4 + 5) + (5 + 1)
    assert NetworkArch((2, 7, 1), activation="sin_periodic").n_params == 7 * 2 + 7 + 7 + 1


def test_init_zero_output_and_determinism():
    arch = NetworkArch((2, 8, 6, 1))
    a, b, c = net.init_params(arch, 5), net.init_params(arch, 5), net.init_params(arch, 6)
    W_out, b_out = net.unpack(arch, a)[-1]
    assert np.all(W_out == 0) and np.all(b_out == 0)
    np.testing.assert_array_equal(a, b)
    assert np.any(net.unpack(arch, a)[0][0] != net.unpack(arch, c)[0][0])
    x = np.random.default_rng(0).random((10, 2))
    assert np.all(net.eval_value(arch, a, x) == 0)


def test_init_glorot_range():
    arch = NetworkArch((3, 50, 40, 1))
    layers = net.unpack(arch, net.init_params(arch, 0))
    for W, beta in layers[:-1]:
        fan_out, fan_in = W.shape
        assert np.abs(W).max() <= np.sqrt(6 / (fan_in + fan_out))
        assert np.all(beta == 0)


def test_unpack_rejects_wrong_length():
    with pytest.raises(ValueError):
        net.unpack(NetworkArch((1, 3, 1)), np.zeros(5))


# --- jets --------------------------------------------------------------------

@pytest.fixture
def sine_unit():
    arch = NetworkArch((1, 1, 1), activation="sin_periodic")
    return arch, net.exact_sine_params(arch, [1.0], [TWO_PI])


def test_sine_unit_jet_at_zero(sine_unit):
    j = net.eval_jet(*sine_unit, np.array([[0.0]]))
    assert j.value[0] == pytest.approx(0.0, abs=1e-15)
    assert j.grad[0, 0] == pytest.approx(TWO_PI)
    assert j.laplacian[0] == pytest.approx(0.0, abs=1e-12)


def test_sine_unit_jet_at_quarter(sine_unit):
    j = net.eval_jet(*sine_unit, np.array([[0.25]]))
    assert j.value[0] == pytest.approx(1.0)
    assert j.grad[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert j.laplacian[0] == pytest.approx(-4 * np.pi**2)


def test_single_layer_sine_jet_matches_layer_formula():
    rng = np.random.default_rng(0)
    arch = NetworkArch((2, 6, 1), activation="sin_periodic")
    theta = random_theta(arch, rng)
    (U, beta), (W, c) = net.unpack(arch, theta)
    x = rng.random((50, 2))
    a = x @ U.T + beta
    j = net.eval_jet(arch, theta, x)
    np.testing.assert_allclose(j.value, np.sin(a) @ W[0] + c[0], rtol=1e-14, atol=1e-14)
    np.testing.assert_allclose(j.grad, (np.cos(a) * W[0]) @ U, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(j.laplacian, -(np.sin(a) * W[0]) @ (U**2).sum(axis=1),
                               rtol=1e-13, atol=1e-12)


def test_jets_match_finite_differences_over_random_nets():
    rng = np.random.default_rng(1)
    for k in range(100):
        d = 1 + k % 3
        hidden = (3, 4) if k % 2 else (5,)
        act = "sin_periodic" if (k % 4 == 0) else "tanh_embedded"
        if act == "sin_periodic":
            hidden = (5,)
        arch = NetworkArch((d, *hidden, 1), activation=act)
        theta = random_theta(arch, rng, 0.7)
        x = rng.random((4, d))
        j = net.eval_jet(arch, theta, x)
        g, lap = fd_jet(arch, theta, x)
        assert rel(j.grad, g) < 1e-5
        assert rel(j.laplacian, lap) < 1e-5


def test_value_and_jet_agree():
    rng = np.random.default_rng(2)
    arch = NetworkArch((3, 6, 5, 4, 1))
    theta = random_theta(arch, rng)
    x = rng.random((30, 3))
    np.testing.assert_allclose(net.eval_jet(arch, theta, x).value,
                               net.eval_value(arch, theta, x), rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_trig_embedded_nets_are_periodic(seed, d):
    rng = np.random.default_rng(seed)
    arch = NetworkArch((d, 4, 3, 1))
    theta = random_theta(arch, rng)
    x = rng.random((1000, d))
    v = net.eval_value(arch, theta, x)
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        np.testing.assert_allclose(net.eval_value(arch, theta, x + e), v, atol=1e-11)


def test_integer_frequency_sine_nets_are_periodic():
    rng = np.random.default_rng(3)
    arch = NetworkArch((2, 5, 1), activation="sin_periodic")
    theta = net.exact_sine_params(arch, rng.normal(size=5), TWO_PI * rng.integers(-3, 4, (5, 2)),
                                  rng.uniform(0, 6, 5))
    x = rng.random((1000, 2))
    v = net.eval_value(arch, theta, x)
    for e in ([1.0, 0.0], [0.0, 1.0]):
        np.testing.assert_allclose(net.eval_value(arch, theta, x + np.array(e)), v, atol=1e-11)


# --- parameter gradients -----------------------------------------------------

def fd_theta(fn, theta, h=1e-6):
    g = np.zeros_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (fn(theta + e) - fn(theta - e)) / (2 * h)
    return g


def test_backprop_output_weight_is_sine(sine_unit):
    arch, theta = sine_unit
    x = np.array([[0.13]])
    tape = ad.Tape()
    t = tape.variable(theta)
    g = net.backprop(tape, ad.vsum(net.eval_jet(arch, t, x).value), t)
    (_, _), (W, _) = net.unpack(arch, np.arange(arch.n_params, dtype=float))
    assert g[int(W[0, 0])] == pytest.approx(np.sin(TWO_PI * 0.13))


def test_backprop_constant_scalar_is_zero():
    arch = NetworkArch((2, 4, 1))
    tape = ad.Tape()
    t = tape.variable(net.init_params(arch, 0))
    j = net.eval_jet(arch, t, np.random.default_rng(0).random((5, 2)))
    out = ad.vsum(j.value) * 0.0 + 3.0
    np.testing.assert_array_equal(net.backprop(tape, out, t), 0.0)


def _scalar(arch, theta, x):
    j = net.eval_jet(arch, theta, x)
    return (0.5 * ad.mean(ad.vsum(j.grad * j.grad, axis=1)) + ad.mean(ad.sin(j.laplacian))
            + ad.mean(ad.exp(j.value * 0.3)))


def _scalar_np(arch, theta, x):
    j = net.eval_jet(arch, theta, x)
    return (0.5 * np.mean((j.grad**2).sum(axis=1)) + np.mean(np.sin(j.laplacian))
            + np.mean(np.exp(0.3 * j.value)))


def test_backprop_matches_finite_differences_over_random_nets():
    rng = np.random.default_rng(4)
    for k in range(100):
        d = 1 + k % 2
        act = "sin_periodic" if k % 3 == 0 else "tanh_embedded"
        hidden = (3,) if act == "sin_periodic" else ((3, 2) if k % 2 else (4,))
        arch = NetworkArch((d, *hidden, 1), activation=act)
        theta = random_theta(arch, rng, 0.5)
        x = rng.random((3, d))
        tape = ad.Tape()
        t = tape.variable(theta)
        g = net.backprop(tape, _scalar(arch, t, x), t)
        ref = fd_theta(lambda th: _scalar_np(arch, th, x), theta)
        assert rel(g, ref) < 1e-5


def test_half_gradient_norm_gradient():
    rng = np.random.default_rng(5)
    arch = NetworkArch((2, 5, 1))
    theta = random_theta(arch, rng)
    x = rng.random((6, 2))
    tape = ad.Tape()
    t = tape.variable(theta)
    j = net.eval_jet(arch, t, x)
    g = net.backprop(tape, 0.5 * ad.vsum(j.grad * j.grad), t)
    ref = fd_theta(lambda th: 0.5 * np.sum(net.eval_jet(arch, th, x).grad ** 2), theta)
    assert rel(g, ref) < 1e-6


# --- constraints ---------------------------------------------------------------

def test_projection_inside_ball_is_identity():
    arch = NetworkArch((1, 4, 1), activation="sin_periodic", gamma1=2.0)
    theta = net.exact_sine_params(arch, [0.25, -0.25, 0.25, 0.25], np.ones(4))
    np.testing.assert_array_equal(net.project_constraints(arch, theta), theta)


def test_projection_on_l1_axis_point():
    arch = NetworkArch((1, 4, 1), activation="sin_periodic", gamma1=1.5)
    theta = net.exact_sine_params(arch, [3.0, 0, 0, 0], np.ones(4))
    W = net.unpack(arch, net.project_constraints(arch, theta))[-1][0]
    np.testing.assert_allclose(W[0], [1.5, 0, 0, 0])


def test_projection_unconstrained_is_noop():
    arch = NetworkArch((2, 3, 1))
    theta = np.random.default_rng(0).normal(size=arch.n_params)
    np.testing.assert_array_equal(net.project_constraints(arch, theta), theta)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0), st.floats(0.1, 5.0))
def test_projection_safety_and_idempotence(seed, g1, g2):
    arch = NetworkArch((2, 6, 1), activation="sin_periodic", gamma1=g1, gamma2=g2)
    theta = np.random.default_rng(seed).normal(scale=3.0, size=arch.n_params)
    once = net.project_constraints(arch, theta)
    (U, beta), (W, _) = net.unpack(arch, once)
    assert np.abs(W).sum() <= g1 + 1e-12
    assert np.sqrt((U**2).sum(axis=1)).max() <= g2 + 1e-12
    np.testing.assert_array_equal(net.project_constraints(arch, once), once)


# --- fields, fitting, checkpoints -------------------------------------------

def test_netfield_exp_transform_jet():
    rng = np.random.default_rng(6)
    arch = NetworkArch((2, 4, 1))
    f = net.NetField(arch, random_theta(arch, rng, 0.5), transform="exp")
    x = rng.random((20, 2))
    j = f.jet(x)
    np.testing.assert_allclose(j.value, f(x))
    g, lap = fd_jet(arch, f.theta, x)
    h = net.eval_value(arch, f.theta, x)
    np.testing.assert_allclose(j.grad, np.exp(h)[:, None] * g, rtol=1e-6)
    np.testing.assert_allclose(j.laplacian, np.exp(h) * (lap + (g**2).sum(axis=1)), rtol=1e-5)


def test_fit_to_field_recovers_sine():
    arch = NetworkArch((1, 6, 1))
    target = model.sum_of_sines(2.0)
    theta = net.fit_to_field(arch, net.init_params(arch, 0) + 0.01, target, maxiter=500)
    x = np.random.default_rng(0).random((200, 1))
    assert np.abs(net.eval_value(arch, theta, x) - target(x)).max() < 1e-4


def test_checkpoint_round_trip(tmp_path):
    arch = NetworkArch((3, 5, 2, 1), gamma1=1.0)
    theta = np.random.default_rng(7).normal(size=arch.n_params)
    path = tmp_path / "m.ckpt"
    net.save_checkpoint(path, {"arch": arch.to_dict(), "seed": 3, "iteration": 11}, theta)
    header, vec = net.load_checkpoint(path)
    assert NetworkArch.from_dict(header["arch"]) == arch
    assert header["seed"] == 3 and header["iteration"] == 11
    np.testing.assert_array_equal(vec, theta)
    raw = path.read_bytes()
    assert raw[raw.index(b"\n") + 1:] == theta.astype("<f8").tobytes()


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    net.save_checkpoint(path, {}, np.arange(4.0))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        net.load_checkpoint(path)
