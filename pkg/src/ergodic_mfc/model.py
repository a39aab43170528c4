"""Problem class, minimized Hamiltonian and the catalog of test cases.

All problems live on the unit torus [0, 1)^d with unit noise.  The drift is
``b(x, a) = b0 * a + grad b_tilde(x)`` and the running cost is::

    f(x, mu, a) = |a|^2 / 2 + f0(x) + int f2(x, xi) mu(dxi) + g(mu(x))

where ``g`` is a local density coupling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad

TWO_PI = 2.0 * np.pi


def as_points(x) -> np.ndarray:
    """Coerce a point or a batch of points to shape (B, d)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[None, :]
    return x


@dataclass(frozen=True)
class FieldJet:
    """Value, gradient and Laplacian of a scalar field at a batch of points."""

    value: np.ndarray  # (B,)
    grad: np.ndarray  # (B, d)
    laplacian: np.ndarray  # (B,)


@dataclass(frozen=True)
class Field:
    """Scalar field on the torus given by vectorized callables.

    Each callable takes points of shape (B, d).  ``grad`` and ``laplacian``
    may be omitted for fields only ever evaluated by value.
    """

    value: Callable[[np.ndarray], np.ndarray]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    laplacian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    def __call__(self, x):
        return self.value(as_points(x))

    def jet(self, x) -> FieldJet:
        x = as_points(x)
        if self.grad is None or self.laplacian is None:
            raise ValueError(f"field {self.name!r} has no analytic derivatives")
        return FieldJet(self.value(x), self.grad(x), self.laplacian(x))

    def __add__(self, other: "Field") -> "Field":
        return Field(
            lambda x: self.value(x) + other.value(x),
            lambda x: self.grad(x) + other.grad(x),
            lambda x: self.laplacian(x) + other.laplacian(x),
            name=f"({self.name}+{other.name})",
        )

    def scaled(self, c: float, shift: float = 0.0) -> "Field":
        """The field ``c * self + shift``."""
        return Field(
            lambda x: c * self.value(x) + shift,
            lambda x: c * self.grad(x),
            lambda x: c * self.laplacian(x),
            name=f"{c}*{self.name}+{shift}",
        )


def zero_field() -> Field:
    return Field(
        lambda x: np.zeros(len(x)),
        lambda x: np.zeros_like(x),
        lambda x: np.zeros(len(x)),
        name="0",
    )


def constant_field(c: float) -> Field:
    return zero_field().scaled(1.0, c)


def sum_of_sines(amplitude: float = 1.0) -> Field:
    """``amplitude * sum_i sin(2 pi x_i)``."""
    a = amplitude
    return Field(
        lambda x: a * np.sin(TWO_PI * x).sum(axis=1),
        lambda x: a * TWO_PI * np.cos(TWO_PI * x),
        lambda x: -a * TWO_PI**2 * np.sin(TWO_PI * x).sum(axis=1),
        name="sum_sin",
    )


def product_of_sin_squares(shift: float = 0.0) -> Field:
    """``prod_i sin(2 pi x_i)^2 + shift``."""

    def factors(x):
        return np.sin(TWO_PI * x) ** 2

    def others(s):
        # product over j != i, computed without division
        d = s.shape[1]
        out = np.ones_like(s)
        for i in range(d):
            for j in range(d):
                if j != i:
                    out[:, i] *= s[:, j]
        return out

    def value(x):
        return factors(x).prod(axis=1) + shift

    def grad(x):
        return TWO_PI * np.sin(2 * TWO_PI * x) * others(factors(x))

    def lap(x):
        return (2 * TWO_PI**2 * np.cos(2 * TWO_PI * x) * others(factors(x))).sum(axis=1)

    return Field(value, grad, lap, name="prod_sin2")


def fourier_field(terms, d: int) -> Field:
    """``sum_k a_k cos(2 pi n_k . x + phase_k)`` from (a, n, phase) triples."""
    amps = np.array([float(t[0]) for t in terms])
    freqs = np.array([np.broadcast_to(np.asarray(t[1], dtype=float), (d,)) for t in terms])
    phases = np.array([float(t[2]) for t in terms])
    if len(amps) == 0:
        return zero_field()
    K = TWO_PI * freqs  # (n_terms, d)

    def arg(x):
        return x @ K.T + phases

    return Field(
        lambda x: np.cos(arg(x)) @ amps,
        lambda x: -(np.sin(arg(x)) * amps) @ K,
        lambda x: -np.cos(arg(x)) @ (amps * (K**2).sum(axis=1)),
        name="fourier",
    )


def fourier_kernel(terms, d: int) -> "Kernel":
    """Translation-invariant kernel ``f2(x, xi) = F(x - xi)`` with F a Fourier sum."""
    F = fourier_field(terms, d)
    return lambda x, xi: F.value(as_points(x) - as_points(xi))


class GibbsField:
    """Density ``exp(h) / Z`` with its jet derived from the jet of ``h``."""

    def __init__(self, log_weight: Field, normalizer: float):
        self.log_weight = log_weight
        self.normalizer = float(normalizer)

    def __call__(self, x):
        return np.exp(self.log_weight(x)) / self.normalizer

    def jet(self, x) -> FieldJet:
        h = self.log_weight.jet(x)
        nu = np.exp(h.value) / self.normalizer
        grad = nu[:, None] * h.grad
        lap = nu * (h.laplacian + (h.grad**2).sum(axis=1))
        return FieldJet(nu, grad, lap)


def torus_mean(func: Callable[[np.ndarray], np.ndarray], d: int, n: int = 256,
               chunk: int = 1 << 18) -> float:
    """Average of ``func`` over the unit torus by the periodic trapezoid rule.

    Spectrally accurate for smooth periodic integrands; uses n^d nodes.
    """
    total = 0.0
    count = n**d
    axis = np.arange(n) / n
    for start in range(0, count, chunk):
        idx = np.arange(start, min(start + chunk, count))
        pts = np.empty((len(idx), d))
        rem = idx
        for k in range(d - 1, -1, -1):
            pts[:, k] = axis[rem % n]
            rem = rem // n
        total += float(np.sum(func(pts)))
    return total / count


@dataclass(frozen=True)
class Coupling:
    """Local density cost ``g(m)`` added to the running cost."""

    kind: str = "none"  # none | quadratic | log
    c: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "quadratic", "log"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")

    def g(self, m):
        if self.kind == "quadratic":
            return self.c * m * m
        if self.kind == "log":
            return np.log(m)
        return 0.0 * m

    def dg(self, m):
        if self.kind == "quadratic":
            return 2.0 * self.c * m
        if self.kind == "log":
            return 1.0 / m
        return 0.0 * m

    def m_dg(self, m):
        """``m * g'(m)``, the local part of the measure-derivative term."""
        if self.kind == "quadratic":
            return 2.0 * self.c * m * m
        if self.kind == "log":
            return 1.0 + 0.0 * m
        return 0.0 * m


Kernel = Callable[[np.ndarray, np.ndarray], np.ndarray]


def kernel_average(kernel: Kernel, x: np.ndarray, xi: np.ndarray, weights: np.ndarray,
                   transpose: bool = False, chunk: int = 2048) -> np.ndarray:
    """``mean_j k(x_i, xi_j) w_j`` for every ``x_i`` (``k(xi_j, x_i)`` if transposed)."""
    out = np.empty(len(x))
    n = len(xi)
    for s in range(0, len(x), chunk):
        xs = x[s:s + chunk]
        a, b = np.repeat(xs, n, axis=0), np.tile(xi, (len(xs), 1))
        K = kernel(b, a) if transpose else kernel(a, b)
        out[s:s + chunk] = K.reshape(len(xs), n) @ weights / n
    return out


@dataclass(frozen=True)
class ProblemSpec:
    """An ergodic mean field control problem (or its game counterpart)."""

    d: int
    b0: float = 1.0
    b_tilde: Field = field(default_factory=zero_field)
    f_tilde0: Field = field(default_factory=zero_field)
    f_tilde2: Optional[Kernel] = None
    coupling: Coupling = field(default_factory=Coupling)
    kind: str = "MFC"
    name: str = "custom"

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("d must be a positive integer")
        if self.b0 == 0:
            raise ValueError("b0 must be non-zero")
        if self.kind not in ("MFC", "MFG"):
            raise ValueError("kind must be 'MFC' or 'MFG'")

    def dmu_local(self, density):
        """Local measure-derivative contribution to the adjoint equation."""
        if self.kind == "MFG":
            return 0.0 * density
        return self.coupling.m_dg(density)


class DomainError(ValueError):
    """Density outside the domain of the coupling (e.g. log of 0)."""


def _check_density(spec: ProblemSpec, density) -> None:
    if spec.coupling.kind == "log" and np.any(np.asarray(ad._val(density)) <= 0):
        raise DomainError("log coupling needs a positive density")


def running_cost(spec: ProblemSpec, x, mu_density_at_x, pairwise_avg, alpha):
    """``|a|^2/2 + f0(x) + pairwise_avg + g(density)`` at a batch of points.

    ``pairwise_avg`` is the caller's estimate of ``int f2(x, xi) mu(dxi)``.
    """
    x = as_points(x)
    _check_density(spec, mu_density_at_x)
    alpha = np.asarray(alpha, dtype=float).reshape(len(x), -1)
    return (0.5 * (alpha**2).sum(axis=1) + spec.f_tilde0.value(x) + pairwise_avg
            + spec.coupling.g(np.asarray(mu_density_at_x, dtype=float)))


def hamiltonian_min(spec: ProblemSpec, x, y, mu_density_at_x, pairwise_avg):
    """Minimized Hamiltonian ``inf_a f(x, mu, a) - y . b(x, a)`` and its argmin.

    Returns ``(value, alpha)`` with ``alpha = b0 * y``.
    """
    x = as_points(x)
    _check_density(spec, mu_density_at_x)
    y = np.asarray(y, dtype=float).reshape(len(x), -1)
    value = (-0.5 * spec.b0**2 * (y**2).sum(axis=1)
             - (y * spec.b_tilde.grad(x)).sum(axis=1)
             + spec.f_tilde0.value(x) + pairwise_avg
             + spec.coupling.g(np.asarray(mu_density_at_x, dtype=float)))
    return value, spec.b0 * y


def hamiltonian_value(spec: ProblemSpec, x, grad_p, density, pairwise_avg=0.0):
    """``H*`` for jets that may live on a tape (no argmin, no domain check)."""
    gb = spec.b_tilde.grad(x)
    q = ad.vsum(grad_p * grad_p, axis=1)
    out = -0.5 * spec.b0**2 * q - ad.vsum(grad_p * gb, axis=1) + spec.f_tilde0.value(x)
    out = out + pairwise_avg
    if spec.coupling.kind != "none":
        out = out + spec.coupling.g(density)
    return out


def manufactured_ftilde(p_exact: Field, spec: Optional[ProblemSpec] = None) -> Field:
    """State cost for which ``p_exact`` solves the log-coupled system.

    Returns ``f(x) = (lap p + |grad p|^2) / 2 - 2 p`` (with b0 = 1, b_tilde = 0).
    """
    def value(x):
        j = p_exact.jet(x)
        return 0.5 * (j.laplacian + (j.grad**2).sum(axis=1)) - 2.0 * j.value

    return Field(value, name=f"manufactured({p_exact.name})")


@dataclass(frozen=True)
class ExactSolution:
    """Closed-form ``(p, nu, lambda)`` attached to a test case."""

    p: Field
    nu: GibbsField
    lam: float

    @property
    def h(self) -> Field:
        return self.nu.log_weight


def test1_ftilde() -> Field:
    """The tilted double-well state cost shared by test cases 1-3 (d = 1)."""
    def value(x):
        x = x[:, 0]
        return 50.0 * (0.1 * np.cos(TWO_PI * x) + np.cos(2 * TWO_PI * x)
                       + 0.1 * np.sin(TWO_PI * (x - np.pi / 8)))

    return Field(value, name="f_test1")


def _exp2p_normalizer(p: Field, d: int, separable: bool) -> float:
    if separable:
        one = torus_mean(lambda x: np.exp(2 * p.value(x)), 1, n=512)
        return one**d
    n = {1: 1024, 2: 256, 3: 64}.get(d, 32)
    return torus_mean(lambda x: np.exp(2 * p.value(x)), d, n=n)


TESTCASE_IDS = (1, 2, 3, 4, 5)


def testcase(case_id: int, d: int = 1):
    """Return ``(spec, exact)`` for one of the five reference problems.

    ``exact`` is ``None`` for cases 1-3, which have no closed form.
    """
    if case_id not in TESTCASE_IDS:
        raise ValueError(f"unknown test case {case_id!r}")
    if int(d) != d or d < 1:
        raise ValueError("d must be a positive integer")
    if case_id in (1, 2, 3):
        if d != 1:
            raise ValueError(f"test case {case_id} is one-dimensional")
        coupling = Coupling("none") if case_id == 1 else Coupling("quadratic", 1.0)
        kind = "MFG" if case_id == 3 else "MFC"
        spec = ProblemSpec(d=1, f_tilde0=test1_ftilde(), coupling=coupling, kind=kind,
                           name=f"T{case_id}")
        return spec, None

    if case_id == 4:
        p = sum_of_sines()
    else:
        p = product_of_sin_squares(shift=-(0.5**d))
    f = manufactured_ftilde(p)
    spec = ProblemSpec(d=d, f_tilde0=f, coupling=Coupling("log"), kind="MFC",
                       name=f"T{case_id}")
    Z = _exp2p_normalizer(p, d, separable=(case_id == 4))
    exact = ExactSolution(p=p, nu=GibbsField(p.scaled(2.0), Z), lam=1.0 - np.log(Z))
    return spec, exact


def h_from_adjoint(spec: ProblemSpec, p: Field) -> Field:
    """Log-density field ``h = 2 (b0^2 p + b_tilde)`` of the optimal Gibbs measure."""
    return (p.scaled(spec.b0**2) + spec.b_tilde).scaled(2.0)
