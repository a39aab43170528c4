"""Direct minimization of the reparametrized ergodic cost over a neural field.

For a log-density field ``h`` the invariant density is ``rho = e^h / Z`` and
the optimal feedback is ``phi = (grad h / 2 - grad b_tilde) / b0``.  The cost

    J(h) = int (|phi|^2 / 2 + f0 + g(rho)) rho + int int f2(x, y) rho(x) rho(y)

is estimated by Monte Carlo on a fresh uniform batch at every iteration and
minimized over the network parameters with SGD or Adam.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .model import ProblemSpec, as_points, hamiltonian_value, kernel_average
from .net import (NetField, NetworkArch, eval_jet, eval_value, init_params,
                  project_constraints, save_checkpoint)
from .optim import TrainingAborted, make_optimizer

log = logging.getLogger(__name__)

CLAMP = 50.0


@dataclass(frozen=True)
class SampleBatch:
    """Uniform points: ``x`` (L, d), ``y`` (L, d) or None, ``z`` (Q, d)."""

    x: np.ndarray
    y: Optional[np.ndarray]
    z: np.ndarray

    def __post_init__(self):
        for name in ("x", "y", "z"):
            a = getattr(self, name)
            if a is None:
                continue
            if a.ndim != 2 or len(a) < 1:
                raise ValueError(f"{name} must be a non-empty (n, d) array")
            if np.any(a < 0) or np.any(a >= 1):
                raise ValueError(f"{name} has coordinates outside [0, 1)")
        if self.y is not None and self.y.shape != self.x.shape:
            raise ValueError("x and y must have the same shape")

    @classmethod
    def draw(cls, rng: np.random.Generator, d: int, L: int, Q: int,
             pairwise: bool) -> "SampleBatch":
        x = rng.random((L, d))
        y = rng.random((L, d)) if pairwise else None
        return cls(x, y, rng.random((Q, d)))


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20_000
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    L: int = 1000
    Q: int = 1000
    seed: int = 0
    project: bool = False
    eval_every: int = 100
    grad_tol: Optional[float] = None  # stop once |grad| falls below this
    dump_dir: Optional[str] = None

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.L < 1 or self.Q < 1 or self.eval_every < 1:
            raise ValueError("L, Q and eval_every must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return make_optimizer("sgd", self.lr, decay=self.lr_decay)
        return make_optimizer("adam", self.lr, beta1=self.beta1, beta2=self.beta2,
                              eps=self.eps, decay=self.lr_decay)


@dataclass
class TrainState:
    theta: np.ndarray
    optimizer: object
    rng: np.random.Generator
    iteration: int = 0
    history: list = field(default_factory=list)  # rows (iteration, loss, *monitor values)
    clamp_count: int = 0
    stopped_early: bool = False

    def history_csv(self, path, monitor_names=()) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", *monitor_names])
            for row in self.history:
                w.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])


def _cost_graph(spec: ProblemSpec, arch: NetworkArch, theta, S: SampleBatch):
    """Record the empirical cost; returns ``(scalar, number of clamped values)``."""
    jx = eval_jet(arch, theta, S.x)
    hz = eval_value(arch, theta, S.z)
    raw = [ad._val(jx.value), ad._val(hz)]
    hx = ad.clamp(jx.value, -CLAMP, CLAMP)
    hz = ad.clamp(hz, -CLAMP, CLAMP)
    Zhat = ad.mean(ad.exp(hz))
    rho_x = ad.exp(hx) / Zhat
    phi = (0.5 * jx.grad - spec.b_tilde.grad(S.x)) * (1.0 / spec.b0)
    local = 0.5 * ad.vsum(phi * phi, axis=1) + spec.f_tilde0.value(S.x)
    kind = spec.coupling.kind
    if kind == "log":
        local = local + (hx - ad.log(Zhat))
    elif kind != "none":
        local = local + spec.coupling.g(rho_x)
    terms = local * rho_x
    if spec.f_tilde2 is not None:
        if S.y is None:
            raise ValueError("pairwise kernel needs y samples")
        hy = eval_value(arch, theta, S.y)
        raw.append(ad._val(hy))
        rho_y = ad.exp(ad.clamp(hy, -CLAMP, CLAMP)) / Zhat
        terms = terms + spec.f_tilde2(S.x, S.y) * rho_x * rho_y
    clamped = sum(int(np.count_nonzero(np.abs(r) > CLAMP)) for r in raw)
    return ad.mean(terms), clamped


def empirical_cost(spec: ProblemSpec, arch: NetworkArch, theta: np.ndarray,
                   S: SampleBatch) -> float:
    """Monte Carlo estimate of the reparametrized cost at ``theta``."""
    value, _ = _cost_graph(spec, arch, np.asarray(theta, dtype=float), S)
    return float(value)


def empirical_cost_and_gradient(spec: ProblemSpec, arch: NetworkArch, theta: np.ndarray,
                                S: SampleBatch):
    """``(value, gradient, clamp count)`` of the empirical cost."""
    tape = ad.Tape()
    t = tape.variable(theta)
    value, clamped = _cost_graph(spec, arch, t, S)
    return float(value.value), tape.gradient(value, t), clamped


def empirical_cost_gradient(spec: ProblemSpec, arch: NetworkArch, theta: np.ndarray,
                            S: SampleBatch) -> np.ndarray:
    return empirical_cost_and_gradient(spec, arch, theta, S)[1]


Objective = Callable[[np.ndarray, SampleBatch], tuple]


def train(spec: ProblemSpec, arch: NetworkArch, config: TrainConfig,
          theta0: Optional[np.ndarray] = None, objective: Optional[Objective] = None,
          monitor: Optional[Callable[[np.ndarray], tuple]] = None,
          state: Optional[TrainState] = None) -> TrainState:
    """Run the stochastic gradient loop.

    ``objective(theta, batch) -> (loss, grad)`` replaces the empirical cost
    (used to test the loop on toy problems).  ``monitor(theta)`` returns extra
    numbers appended to each history row.  Passing a previous ``state``
    continues it for ``config.iterations`` more steps.
    """
    if spec.kind != "MFC" and objective is None:
        raise ValueError("direct minimization applies to control problems (kind='MFC')")
    if arch.d != spec.d:
        raise ValueError("network input dimension differs from the problem dimension")
    if state is None:
        theta = init_params(arch, config.seed) if theta0 is None else np.array(theta0, float)
        if config.project:
            theta = project_constraints(arch, theta)
        state = TrainState(theta, config.make_optimizer(), np.random.default_rng(config.seed))
    pairwise = spec.f_tilde2 is not None

    def step_value(theta, batch):
        if objective is not None:
            return (*objective(theta, batch), 0)
        return empirical_cost_and_gradient(spec, arch, theta, batch)

    def record(loss):
        extra = tuple(monitor(state.theta)) if monitor is not None else ()
        state.history.append((state.iteration, loss, *extra))

    stop = state.iteration + config.iterations
    while state.iteration < stop:
        batch = SampleBatch.draw(state.rng, spec.d, config.L, config.Q, pairwise)
        loss, grad, clamped = step_value(state.theta, batch)
        state.clamp_count += clamped
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise _abort(arch, config, state, loss)
        if state.iteration % config.eval_every == 0:
            record(loss)
        if config.grad_tol is not None and np.linalg.norm(grad) < config.grad_tol:
            state.stopped_early = True
            record(loss)
            break
        theta = state.optimizer.step(state.theta, grad)
        if config.project:
            theta = project_constraints(arch, theta)
        state.theta = theta
        state.iteration += 1
    if state.clamp_count:
        log.warning("field values were clamped %d times", state.clamp_count)
    return state


def _abort(arch, config, state, loss) -> TrainingAborted:
    path = None
    if config.dump_dir is not None:
        os.makedirs(config.dump_dir, exist_ok=True)
        path = os.path.join(config.dump_dir, f"abort_{state.iteration}.ckpt")
        save_checkpoint(path, {"arch": arch.to_dict(), "seed": config.seed,
                               "iteration": state.iteration}, state.theta)
    return TrainingAborted(f"non-finite loss {loss!r} at iteration {state.iteration}",
                           state, path)


@dataclass
class SolutionReport:
    """Grid evaluation of a learned solution.

    ``p_field`` and ``nu_field`` evaluate the same (centered, normalized)
    fields at arbitrary points.
    """

    x: np.ndarray
    p: np.ndarray
    nu: np.ndarray
    phi: np.ndarray
    lam: float
    p_field: Callable
    nu_field: Callable
    history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        d = self.x.shape[1]
        names = [f"x{i + 1}" for i in range(d)] + ["p", "nu"] + [f"phi{i + 1}" for i in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for row in np.column_stack([self.x, self.p, self.nu, self.phi]):
                w.writerow([f"{v:.17g}" for v in row])


def tensor_grid(d: int, n: int) -> np.ndarray:
    axes = [np.arange(n) / n] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def recover_solution(spec: ProblemSpec, arch: NetworkArch, theta: np.ndarray,
                     grid=256) -> SolutionReport:
    """``(p, nu, phi, lambda)`` implied by the learned log-density ``h_theta``.

    ``grid`` is a number of nodes per axis (uniform tensor grid) or an array
    of points.  The normalizer, the centering of ``p`` and ``lambda`` are all
    averages over the grid.
    """
    x = tensor_grid(spec.d, int(grid)) if np.isscalar(grid) else as_points(grid)
    if len(x) == 0:
        raise ValueError("empty evaluation grid")
    b2 = spec.b0**2
    j = eval_jet(arch, theta, x)
    shift = j.value.max()
    Z = float(np.mean(np.exp(j.value - shift)))
    nu = np.exp(j.value - shift) / Z
    bt = spec.b_tilde.jet(x)
    p_raw = (0.5 * j.value - bt.value) / b2
    c = float(p_raw.mean())
    p = p_raw - c
    grad_p = (0.5 * j.grad - bt.grad) / b2
    lap_p = (0.5 * j.laplacian - bt.laplacian) / b2
    phi = spec.b0 * grad_p

    pair = dmu = 0.0
    if spec.f_tilde2 is not None:
        pair = kernel_average(spec.f_tilde2, x, x, nu)
        if spec.kind == "MFC":
            dmu = kernel_average(spec.f_tilde2, x, x, nu, transpose=True)
    H = hamiltonian_value(spec, x, grad_p, nu, pair)
    lam = float(np.mean(H + spec.dmu_local(nu) + dmu - 0.5 * lap_p))

    net = NetField(arch, theta)
    log_Z = shift + np.log(Z)

    def p_field(pts):
        pts = as_points(pts)
        return (0.5 * net(pts) - spec.b_tilde.value(pts)) / b2 - c

    def nu_field(pts):
        return np.exp(net(as_points(pts)) - log_Z)

    return SolutionReport(x, p, nu, phi, lam, p_field, nu_field)
