"""Reference solutions and error metrics.

* :func:`solve_fd` - periodic finite differences for the 1D optimality
  system: Newton on the ergodic HJB equation for a frozen density, closed by
  the Gibbs form of the invariant density and damped fixed-point updates.
* :func:`relative_l2` - Monte Carlo relative L2 error between two fields.
* :func:`quadrature_cost` - deterministic evaluation of the reparametrized
  ergodic cost of a log-density field ``h``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import ProblemSpec, as_points, kernel_average

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid1D:
    M: int = 512

    def __post_init__(self):
        if self.M < 16:
            raise ValueError("Grid1D needs at least 16 nodes")

    @property
    def dx(self) -> float:
        return 1.0 / self.M

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.M) / self.M


@dataclass
class FdSolution:
    grid: Grid1D
    p: np.ndarray
    nu: np.ndarray
    lam: float
    iterations: int
    residual: float
    converged: bool
    damping: float
    history: list = field(default_factory=list)

    @property
    def mass(self) -> float:
        return float(self.nu.sum() * self.grid.dx)

    def p_field(self):
        return _periodic_interpolant(self.grid, self.p)

    def nu_field(self):
        return _periodic_interpolant(self.grid, self.nu)

    def to_csv(self, path) -> None:
        """Columns: x, p, nu."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "p", "nu"])
            for row in zip(self.grid.x, self.p, self.nu):
                w.writerow([f"{v:.17g}" for v in row])


def _periodic_interpolant(grid: Grid1D, values: np.ndarray):
    xp = grid.x
    fp = np.asarray(values)

    def f(x):
        x = as_points(x)[:, 0] % 1.0
        return np.interp(x, xp, fp, period=1.0)

    return f


def _difference_matrices(M: int):
    dx = 1.0 / M
    e = np.ones(M)
    D1 = sp.diags([-e[:-1], e[:-1]], [-1, 1], shape=(M, M), format="lil")
    D1[0, M - 1] = -1.0
    D1[M - 1, 0] = 1.0
    D2 = sp.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1], shape=(M, M), format="lil")
    D2[0, M - 1] = 1.0
    D2[M - 1, 0] = 1.0
    return (D1.tocsr() / (2 * dx)), (D2.tocsr() / dx**2)


def _gibbs(spec: ProblemSpec, grid: Grid1D, p: np.ndarray, bt: np.ndarray) -> np.ndarray:
    h = 2.0 * (spec.b0**2 * p + bt)
    w = np.exp(h - h.max())
    return w / (w.sum() * grid.dx)


def _hjb_rhs(spec: ProblemSpec, grid: Grid1D, nu: np.ndarray, f0: np.ndarray) -> np.ndarray:
    """``f0 + pairwise + g(nu)`` plus the measure-derivative term (MFC only)."""
    rhs = f0 + spec.coupling.g(nu)
    if spec.kind == "MFC":
        rhs = rhs + spec.coupling.m_dg(nu)
    if spec.f_tilde2 is not None:
        x = grid.x[:, None]
        xi = np.repeat(x, grid.M, axis=0)
        xx = np.tile(x, (grid.M, 1))
        K = spec.f_tilde2(xi, xx).reshape(grid.M, grid.M)  # K[j, i] = f2(x_j, x_i)
        rhs = rhs + grid.dx * K @ nu
        if spec.kind == "MFC":
            rhs = rhs + grid.dx * K.T @ nu
    return rhs


def _newton_hjb(spec, grid, D1, D2, rhs, bt_grad, p0, lam0, tol=1e-13, max_iter=50):
    """Solve ``lam + D2 p / 2 + b0^2 (D1 p)^2 / 2 + D1 p * bt' = rhs`` with mean(p) = 0.

    Stops once the Newton step is below ``tol`` relative to the iterate (the
    residual itself has a round-off floor of order M^2 * eps).
    """
    M = grid.M
    p, lam = p0.copy(), lam0
    b2 = spec.b0**2
    last_row = sp.csr_matrix(np.append(np.full(M, 1.0 / M), 0.0))
    ones_col = sp.csr_matrix(np.ones((M, 1)))
    for _ in range(max_iter):
        q = D1 @ p
        F = lam + 0.5 * (D2 @ p) + 0.5 * b2 * q * q + q * bt_grad - rhs
        G = np.append(F, p.mean())
        if not np.all(np.isfinite(G)):
            return p, lam, False
        Jp = 0.5 * D2 + sp.diags(b2 * q + bt_grad) @ D1
        J = sp.vstack([sp.hstack([Jp, ones_col]), last_row], format="csc")
        step = spla.spsolve(J, -G)
        p = p + step[:M]
        lam = lam + step[M]
        if np.abs(step).max() <= tol * max(1.0, np.abs(p).max(), abs(lam)):
            return p, lam, True
    return p, lam, False


def solve_fd(spec: ProblemSpec, grid: Grid1D | None = None, damping: float = 0.5,
             tol: float = 1e-10, max_iter: int = 5000) -> FdSolution:
    """Damped fixed point between the ergodic HJB equation and the Gibbs density.

    Each sweep freezes the density, solves the discrete HJB equation for
    ``(p, lambda)`` by Newton's method (centered differences, mean(p) = 0),
    forms the Gibbs density of ``h = 2 (b0^2 p + b_tilde)`` and relaxes
    towards it.  The damping is halved whenever the fixed-point residual
    grows.  If ``max_iter`` is hit, the best iterate is returned with
    ``converged=False``.
    """
    if spec.d != 1:
        raise ValueError("solve_fd handles d = 1 only")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    grid = grid or Grid1D()
    X = grid.x[:, None]
    D1, D2 = _difference_matrices(grid.M)
    f0 = spec.f_tilde0.value(X)
    bt = spec.b_tilde.value(X)
    bt_grad = spec.b_tilde.grad(X)[:, 0]

    nu = _gibbs(spec, grid, np.zeros(grid.M), bt)
    nu_prev = nu
    p, lam = np.zeros(grid.M), 0.0
    theta = damping
    retried = False
    best = None
    prev_res = np.inf
    history = []
    for k in range(1, max_iter + 1):
        rhs = _hjb_rhs(spec, grid, nu, f0)
        p_new, lam_new, ok = _newton_hjb(spec, grid, D1, D2, rhs, bt_grad, p, lam)
        if not ok:
            if retried:
                raise RuntimeError("Newton iteration for the HJB equation diverged twice")
            retried = True
            theta *= 0.5
            log.warning("Newton failed at sweep %d; damping halved to %g", k, theta)
            nu = 0.5 * (nu + nu_prev)
            rhs = _hjb_rhs(spec, grid, nu, f0)
            p_new, lam_new, ok = _newton_hjb(spec, grid, D1, D2, rhs, bt_grad,
                                             np.zeros(grid.M), 0.0, max_iter=200)
            if not ok:
                raise RuntimeError("Newton iteration for the HJB equation diverged")
        p, lam = p_new, lam_new
        target = _gibbs(spec, grid, p, bt)
        res = float(np.abs(target - nu).max())
        history.append(res)
        if best is None or res < best[0]:
            best = (res, p.copy(), lam, target.copy(), k)
        if res < tol:
            return FdSolution(grid, p - p.mean(), target, float(lam), k, res, True, theta, history)
        if res > prev_res:
            theta = max(0.5 * theta, 1e-4)
        prev_res = res
        nu_prev = nu
        nu = (1.0 - theta) * nu + theta * target
    res, p, lam, nu, k = best
    log.warning("solve_fd stopped after %d sweeps, residual %.3g", max_iter, res)
    return FdSolution(grid, p - p.mean(), nu, float(lam), max_iter, res, False, theta, history)


def relative_l2(field_approx, field_exact, n_mc: int = 100_000, seed: int = 0,
                d: int = 1) -> float:
    """``sqrt(int |exact - approx|^2 / int |exact|^2)`` by Monte Carlo on [0, 1)^d."""
    x = np.random.default_rng(seed).random((n_mc, d))
    e = np.asarray(field_exact(x), dtype=float)
    a = np.asarray(field_approx(x), dtype=float)
    den = float(np.mean(e * e))
    if den == 0.0:
        raise ZeroDivisionError("exact field vanishes on the sample")
    return float(np.sqrt(np.mean((e - a) ** 2) / den))


def _grid_points(d: int, n: int) -> np.ndarray:
    axes = [np.arange(n) / n] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def quadrature_cost(spec: ProblemSpec, h, resolution: int = 1024, n_mc: int = 200_000,
                    seed: int = 0, return_stderr: bool = False):
    """Reparametrized ergodic cost of the log-density field ``h``.

    ``h`` is a field handle with ``jet``.  For d <= 3 the periodic trapezoid
    rule on ``resolution**d`` nodes is used; otherwise Monte Carlo with
    ``n_mc`` points (the standard error is returned on request).
    """
    d = spec.d
    if d <= 3:
        x = _grid_points(d, resolution)
    else:
        x = np.random.default_rng(seed).random((n_mc, d))
    j = h.jet(x)
    hv = j.value
    shift = hv.max()
    w = np.exp(hv - shift)
    Z = w.mean()
    rho = w / Z
    phi = (0.5 * j.grad - spec.b_tilde.grad(x)) / spec.b0
    local = 0.5 * (phi**2).sum(axis=1) + spec.f_tilde0.value(x)
    if spec.coupling.kind == "log":
        local = local + (hv - shift - np.log(Z))
    elif spec.coupling.kind != "none":
        local = local + spec.coupling.g(rho)
    terms = local * rho
    if spec.f_tilde2 is not None:
        terms = terms + kernel_average(spec.f_tilde2, x, x, rho) * rho
    value = float(terms.mean())
    if not return_stderr:
        return value
    stderr = 0.0 if d <= 3 else float(terms.std(ddof=1) / np.sqrt(len(x)))
    return value, stderr
