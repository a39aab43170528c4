import numpy as np
import pytest
from scipy.linalg import eigh

from ergodic_mfc import bench, model
from ergodic_mfc.bench import Grid1D
from ergodic_mfc.model import ProblemSpec

TWO_PI = 2 * np.pi


@pytest.fixture(scope="module")
def fd_case4():
    spec, exact = model.testcase(4, 1)
    return spec, exact, bench.solve_fd(spec, Grid1D(512))


def schroedinger_ground_state(f, K=64, n=1024):
    """Lowest eigenpair of -u''/2 + f u on the unit circle by Fourier-Galerkin."""
    x = np.arange(n) / n
    fhat = np.fft.fft(f(x[:, None])) / n
    ks = np.arange(-K, K + 1)
    H = np.array([[fhat[(j - k) % n] for k in ks] for j in ks])
    H = H + np.diag(0.5 * (TWO_PI * ks) ** 2)
    w, V = eigh(H)
    coef = V[:, 0]
    psi = lambda t: np.real(np.exp(1j * TWO_PI * np.outer(t, ks)) @ coef)  # noqa: E731
    return w[0], psi


def test_grid():
    g = Grid1D(16)
    assert g.dx == 1 / 16 and g.x[-1] == 15 / 16
    with pytest.raises(ValueError):
        Grid1D(8)


def test_flat_problem():
    sol = bench.solve_fd(ProblemSpec(d=1), Grid1D(64))
    assert sol.converged
    assert np.abs(sol.p).max() < 1e-10 and np.abs(sol.nu - 1).max() < 1e-10 and abs(sol.lam) < 1e-10


def test_case4_matches_exact(fd_case4):
    spec, exact, sol = fd_case4
    assert sol.converged
    assert bench.relative_l2(sol.p_field(), exact.p) < 1e-3
    assert bench.relative_l2(sol.nu_field(), exact.nu) < 1e-3
    assert abs(sol.lam - 0.176006458517) < 1e-3


def test_case4_refinement_is_second_order():
    spec, exact = model.testcase(4, 1)
    e = [bench.relative_l2(bench.solve_fd(spec, Grid1D(M)).p_field(), exact.p)
         for M in (64, 128)]
    assert 3.5 <= e[0] / e[1] <= 4.5


def test_mass_and_gibbs_closure(fd_case4):
    spec, _, sol = fd_case4
    assert sol.mass == pytest.approx(1.0, abs=1e-10)
    g = np.exp(2 * spec.b0**2 * sol.p + 2 * spec.b_tilde.value(sol.grid.x[:, None]))
    g /= g.mean()
    assert np.abs(g - sol.nu).max() < 1e-10
    assert abs(sol.p.mean()) < 1e-14


@pytest.mark.parametrize("case", [1, 2, 3])
def test_reference_cases_converge(case):
    spec, _ = model.testcase(case, 1)
    sol = bench.solve_fd(spec, Grid1D(512))
    assert sol.converged and sol.residual < 1e-10
    assert sol.mass == pytest.approx(1.0, abs=1e-10)
    assert np.all(sol.nu > 0)


def test_case1_against_spectral_ground_state():
    spec, _ = model.testcase(1)
    E0, psi = schroedinger_ground_state(spec.f_tilde0.value)
    coarse = bench.solve_fd(spec, Grid1D(512))
    fine = bench.solve_fd(spec, Grid1D(1024))
    assert abs(coarse.lam - E0) < 2e-3
    assert abs(fine.lam - E0) < abs(coarse.lam - E0) / 3
    x = fine.grid.x
    s = psi(x)
    p_ref = np.log(np.abs(s))
    p_ref -= p_ref.mean()
    assert np.abs(fine.p - p_ref).max() < 1e-4


def test_game_and_control_systems_differ():
    l2 = bench.solve_fd(model.testcase(2, 1)[0], Grid1D(256)).lam
    l3 = bench.solve_fd(model.testcase(3, 1)[0], Grid1D(256)).lam
    assert l2 > l3  # the extra measure-derivative term m g'(m) = 2 m^2 is positive


def test_non_converged_returns_best_iterate():
    spec, _ = model.testcase(2, 1)
    sol = bench.solve_fd(spec, Grid1D(128), max_iter=3)
    assert not sol.converged and sol.iterations == 3
    assert sol.residual == min(sol.history)


def test_solver_input_validation():
    with pytest.raises(ValueError):
        bench.solve_fd(model.testcase(4, 2)[0])
    with pytest.raises(ValueError):
        bench.solve_fd(model.testcase(4, 1)[0], damping=0.0)


def test_fd_csv(tmp_path, fd_case4):
    _, _, sol = fd_case4
    sol.to_csv(tmp_path / "fd.csv")
    data = np.loadtxt(tmp_path / "fd.csv", delimiter=",", skiprows=1)
    assert data.shape == (512, 3)
    assert data[:, 2].sum() / 512 == pytest.approx(1.0, abs=1e-10)


def test_interpolants_periodic(fd_case4):
    _, _, sol = fd_case4
    f = sol.p_field()
    np.testing.assert_allclose(f(sol.grid.x[:, None]), sol.p, atol=1e-14)
    np.testing.assert_allclose(f(np.array([[0.999999]])), f(np.array([[0.0]])), atol=1e-4)


# --- relative error -----------------------------------------------------------

def sine(x):
    return np.sin(TWO_PI * x[:, 0])


def test_relative_l2_examples():
    assert bench.relative_l2(sine, sine) == 0.0
    assert bench.relative_l2(lambda x: 2 * sine(x), sine) == pytest.approx(1.0)
    assert bench.relative_l2(lambda x: 0 * sine(x), sine) == pytest.approx(1.0)
    with pytest.raises(ZeroDivisionError):
        bench.relative_l2(sine, lambda x: np.zeros(len(x)))


def centered(f):
    m = model.torus_mean(f, 1, 1024)
    return lambda x: f(x) - m


def test_relative_l2_shift_invariance_after_centering():
    a = lambda x: sine(x) + 0.1 * np.cos(2 * TWO_PI * x[:, 0]) + 0.3  # noqa: E731
    base = bench.relative_l2(centered(a), centered(sine))
    for c in np.random.default_rng(0).normal(scale=3, size=5):
        shifted = bench.relative_l2(centered(lambda x: a(x) + c), centered(lambda x: sine(x) + c))
        assert shifted == pytest.approx(base, rel=1e-10)


# --- quadrature cost -------------------------------------------------------------

def test_quadrature_constant_kernel():
    spec = ProblemSpec(d=2, f_tilde2=lambda x, xi: np.full(len(x), 1.3))
    assert bench.quadrature_cost(spec, model.zero_field(), resolution=16) == pytest.approx(1.3)


def test_quadrature_refinement_case4():
    spec, exact = model.testcase(4, 1)
    a = bench.quadrature_cost(spec, exact.h, resolution=1 << 10)
    b = bench.quadrature_cost(spec, exact.h, resolution=1 << 12)
    assert abs(a - b) < 1e-4 * abs(b)
    assert b == pytest.approx(-0.823993541482956283, abs=1e-12)  # 30-digit mpmath quadrature


def test_quadrature_case4_cost_identity():
    """Running cost integrated against the exact density, written without h."""
    spec, exact = model.testcase(4, 1)
    x = (np.arange(4096) / 4096)[:, None]
    nu = exact.nu(x)
    grad_p = exact.p.grad(x)[:, 0]
    direct = np.mean((0.5 * (grad_p**2) + spec.f_tilde0.value(x) + np.log(nu)) * nu)
    assert bench.quadrature_cost(spec, exact.h, resolution=4096) == pytest.approx(direct, abs=1e-12)


def test_quadrature_local_minimality():
    spec, exact = model.testcase(4, 1)
    base = bench.quadrature_cost(spec, exact.h, resolution=512)
    rng = np.random.default_rng(0)
    for _ in range(20):
        pert = model.fourier_field([(0.05 * rng.normal(), [rng.integers(1, 4)], rng.uniform(0, 6))
                                    for _ in range(3)], 1)
        assert bench.quadrature_cost(spec, exact.h + pert, resolution=512) >= base


@pytest.mark.parametrize("case,d", [(2, 1), (4, 1), (5, 2)])
def test_quadrature_shift_invariance(case, d):
    spec, _ = model.testcase(case, d)
    h = model.fourier_field([(0.7, [1] * d, 0.1), (0.3, [2] + [0] * (d - 1), 1.0)], d)
    base = bench.quadrature_cost(spec, h, resolution=256 if d == 1 else 64)
    for c in (-3.0, 1.0, 7.0):
        shifted = bench.quadrature_cost(spec, h.scaled(1.0, c), resolution=256 if d == 1 else 64)
        assert abs(shifted - base) < 1e-10


def test_quadrature_monte_carlo_in_high_dimension():
    spec, exact = model.testcase(4, 4)
    v, se = bench.quadrature_cost(spec, exact.h, n_mc=50_000, return_stderr=True)
    assert se > 0 and np.isfinite(v)
