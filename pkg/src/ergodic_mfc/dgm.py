"""Deep Galerkin solver for the stationary optimality system.

Two networks represent the density ``nu = exp(net_1)`` and the adjoint
``p = net_2``; a scalar ``theta3`` stands in for the ergodic constant.  The
loss is built from root-mean-square PDE residuals on uniform interior
points, periodicity gaps on the faces ``x_i = 0`` (penalty mode only) and the
normalization conditions ``int nu = 1`` and ``int p = 0``.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .model import FieldJet, ProblemSpec, as_points, hamiltonian_value
from .net import NetField, NetworkArch, eval_jet, eval_value, init_params, save_checkpoint
from .optim import TrainingAborted, make_optimizer

log = logging.getLogger(__name__)

COMPONENTS = ("fp_residual", "hjb_residual", "periodicity", "mass", "p_mean")
CSV_COLUMNS = ("iteration",) + COMPONENTS + ("total", "theta3")


@dataclass(frozen=True)
class DgmConfig:
    iterations: int = 20_000
    n_interior: int = 1000
    n_boundary: int = 100  # per face, penalty mode only
    w_fp: float = 1.0
    w_hjb: float = 1.0
    w_periodicity: float = 1.0
    w_normalization: float = 1.0
    w_p_mean: Optional[float] = None  # weight of |mean p|; defaults to w_normalization
    periodicity: str = "exact"  # or "penalty"
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 100
    dump_dir: Optional[str] = None

    def __post_init__(self):
        if self.periodicity not in ("exact", "penalty"):
            raise ValueError("periodicity must be 'exact' or 'penalty'")
        if self.w_p_mean is None:
            object.__setattr__(self, "w_p_mean", self.w_normalization)
        if min(self.w_fp, self.w_hjb, self.w_periodicity, self.w_normalization,
               self.w_p_mean) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.periodicity == "exact" and self.w_periodicity != 0:
            # the penalty is identically zero for exactly periodic networks
            object.__setattr__(self, "w_periodicity", 0.0)
        if self.iterations < 0 or self.n_interior < 1 or self.n_boundary < 1:
            raise ValueError("iterations >= 0 and sample counts >= 1 required")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return make_optimizer("sgd", self.lr, decay=self.lr_decay)
        return make_optimizer("adam", self.lr, beta1=self.beta1, beta2=self.beta2,
                              eps=self.eps, decay=self.lr_decay)


@dataclass(frozen=True)
class DgmSamples:
    """Interior points (n, d) and, per face ``x_i = 0``, points on that face."""

    interior: np.ndarray
    faces: tuple = ()

    def __post_init__(self):
        if len(self.interior) == 0:
            raise ValueError("empty interior sample")

    @classmethod
    def draw(cls, rng: np.random.Generator, d: int, n_interior: int,
             n_boundary: int = 0) -> "DgmSamples":
        interior = rng.random((n_interior, d))
        faces = []
        if n_boundary:
            for i in range(d):
                pts = rng.random((n_boundary, d))
                pts[:, i] = 0.0
                faces.append(pts)
        return cls(interior, tuple(faces))


@dataclass
class DgmState:
    arch1: NetworkArch
    arch2: NetworkArch
    theta1: np.ndarray
    theta2: np.ndarray
    theta3: float = 0.0
    optimizer: object = None
    rng: Optional[np.random.Generator] = None
    iteration: int = 0
    history: list = field(default_factory=list)  # rows in CSV_COLUMNS order

    @property
    def nu(self) -> NetField:
        return NetField(self.arch1, self.theta1, transform="exp")

    @property
    def p(self) -> NetField:
        return NetField(self.arch2, self.theta2)

    @property
    def lam(self) -> float:
        return float(self.theta3)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta1, self.theta2, [self.theta3]])

    def set_flat(self, v: np.ndarray) -> None:
        n1 = self.arch1.n_params
        self.theta1 = v[:n1].copy()
        self.theta2 = v[n1:-1].copy()
        self.theta3 = float(v[-1])

    def history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in self.history:
                w.writerow([row[0]] + [f"{v:.17g}" for v in row[1:]])

    def save(self, path, extra: Optional[dict] = None) -> None:
        header = {"arch1": self.arch1.to_dict(), "arch2": self.arch2.to_dict(),
                  "iteration": self.iteration, **(extra or {})}
        save_checkpoint(path, header, self.flat())


def _fields_at(state, x):
    """Jets of (nu, p) and the constant, for a DgmState or an exact solution."""
    return state.nu.jet(x), state.p.jet(x), state.lam


def _fp(spec: ProblemSpec, x, nu: FieldJet, p: FieldJet):
    b2 = spec.b0**2
    bt = spec.b_tilde.jet(x)
    drift = b2 * p.grad + bt.grad  # minus the y-derivative of H*
    return (0.5 * nu.laplacian - (b2 * p.laplacian + bt.laplacian) * nu.value
            - ad.vsum(drift * nu.grad, axis=1))


def _pairwise(spec: ProblemSpec, x, nu_values, transpose: bool):
    """Batch estimate of ``int f2(x, xi) nu(xi) dxi`` (or ``f2(xi, x)``)."""
    n = len(x)
    a, b = np.repeat(x, n, axis=0), np.tile(x, (n, 1))
    K = (spec.f_tilde2(b, a) if transpose else spec.f_tilde2(a, b)).reshape(n, n)
    return ad.vsum(K * ad.reshape(nu_values, (1, n)), axis=1) * (1.0 / n)


def _hjb(spec: ProblemSpec, x, nu: FieldJet, p: FieldJet, lam, dmu_term=None):
    pair = 0.0
    if spec.f_tilde2 is not None:
        pair = _pairwise(spec, x, nu.value, transpose=False)
    if dmu_term is None:
        dmu_term = spec.dmu_local(nu.value)
        if spec.f_tilde2 is not None and spec.kind == "MFC":
            dmu_term = dmu_term + _pairwise(spec, x, nu.value, transpose=True)
    H = hamiltonian_value(spec, x, p.grad, nu.value, pair)
    return lam + 0.5 * p.laplacian - H - dmu_term


def residual_fp(spec: ProblemSpec, state, x) -> np.ndarray:
    """Stationary Fokker-Planck residual ``nu/2'' + div(d_y H* nu)`` at points ``x``.

    ``state`` is a :class:`DgmState` or anything exposing ``nu``, ``p`` (field
    handles with ``jet``) and ``lam``, e.g. an exact solution.
    """
    x = as_points(x)
    nu, p, _ = _fields_at(state, x)
    return _fp(spec, x, nu, p)


def residual_hjb(spec: ProblemSpec, state, x, dmu_term=None) -> np.ndarray:
    """Ergodic adjoint residual ``lam + p''/2 - H* - dmu_term`` at points ``x``.

    By default ``dmu_term`` is the measure-derivative term of the problem:
    zero for games, ``nu g'(nu)`` plus the transposed kernel average (over
    the points ``x`` themselves) for control problems.
    """
    x = as_points(x)
    nu, p, lam = _fields_at(state, x)
    return _hjb(spec, x, nu, p, lam, dmu_term)


def _rms(r):
    return ad.sqrt(ad.mean(r * r))


def _loss_graph(spec, arch1, arch2, t1, t2, t3, samples: DgmSamples, config: DgmConfig):
    x = samples.interior
    j1 = eval_jet(arch1, t1, x)
    e = ad.exp(j1.value)
    nu = FieldJet(e, ad.reshape(e, (-1, 1)) * j1.grad,
                  e * (j1.laplacian + ad.vsum(j1.grad * j1.grad, axis=1)))
    p = eval_jet(arch2, t2, x)
    comps = {"fp_residual": _rms(_fp(spec, x, nu, p)),
             "hjb_residual": _rms(_hjb(spec, x, nu, p, t3))}
    per = 0.0
    if config.periodicity == "penalty":
        for i, face in enumerate(samples.faces):
            other = face.copy()
            other[:, i] = 1.0
            both = np.concatenate([face, other])
            n = len(face)
            for arch, t, transform in ((arch1, t1, ad.exp), (arch2, t2, None)):
                v = eval_value(arch, t, both)
                if transform is not None:
                    v = transform(v)
                per = per + _rms(v[:n] - v[n:])
    comps["periodicity"] = per
    comps["mass"] = ad.absolute(1.0 - ad.mean(nu.value))
    comps["p_mean"] = ad.absolute(ad.mean(p.value))
    total = (config.w_fp * comps["fp_residual"] + config.w_hjb * comps["hjb_residual"]
             + config.w_periodicity * comps["periodicity"]
             + config.w_normalization * comps["mass"] + config.w_p_mean * comps["p_mean"])
    return total, comps


def empirical_loss(spec: ProblemSpec, state: DgmState, samples: DgmSamples,
                   config: Optional[DgmConfig] = None):
    """``(total, components)`` of the empirical loss at the current state."""
    config = config or DgmConfig()
    total, comps = _loss_graph(spec, state.arch1, state.arch2, state.theta1, state.theta2,
                               state.theta3, samples, config)
    return float(ad._val(total)), {k: float(ad._val(v)) for k, v in comps.items()}


def empirical_loss_and_gradient(spec: ProblemSpec, state: DgmState, samples: DgmSamples,
                                config: DgmConfig):
    """Total loss, components and the gradient with respect to ``state.flat()``."""
    tape = ad.Tape()
    t1, t2, t3 = tape.variable(state.theta1), tape.variable(state.theta2), tape.variable(state.theta3)
    total, comps = _loss_graph(spec, state.arch1, state.arch2, t1, t2, t3, samples, config)
    g1, g2, g3 = tape.gradient(total, [t1, t2, t3])
    grad = np.concatenate([g1, g2, np.ravel(g3)])
    return float(total.value), {k: float(ad._val(v)) for k, v in comps.items()}, grad


def init_state(arch1: NetworkArch, arch2: NetworkArch, config: DgmConfig) -> DgmState:
    """Zero-output networks (``nu = 1``, ``p = 0``) and ``theta3 = 0``."""
    return DgmState(arch1, arch2, init_params(arch1, config.seed),
                    init_params(arch2, config.seed + 1), 0.0, config.make_optimizer(),
                    np.random.default_rng(config.seed))


def _check_archs(spec, arch1, arch2, config):
    for a in (arch1, arch2):
        if a.d != spec.d:
            raise ValueError("network input dimension differs from the problem dimension")
        if config.periodicity == "penalty" and a.embedding != "raw":
            raise ValueError("penalty mode needs raw-coordinate networks")
        if config.periodicity == "exact" and a.embedding != "trig":
            raise ValueError("exact periodicity needs trigonometrically embedded networks")


def train_dgm(spec: ProblemSpec, arch1: NetworkArch, arch2: NetworkArch, config: DgmConfig,
              state: Optional[DgmState] = None, monitor=None) -> DgmState:
    """Adam/SGD on ``(theta1, theta2, theta3)`` with fresh samples every step.

    ``monitor(state)`` may return extra numbers appended to history rows.
    """
    _check_archs(spec, arch1, arch2, config)
    state = state or init_state(arch1, arch2, config)
    n_b = config.n_boundary if config.periodicity == "penalty" else 0
    stop = state.iteration + config.iterations
    while state.iteration < stop:
        samples = DgmSamples.draw(state.rng, spec.d, config.n_interior, n_b)
        total, comps, grad = empirical_loss_and_gradient(spec, state, samples, config)
        if not np.isfinite(total) or not np.all(np.isfinite(grad)):
            raise _abort(state, config, total)
        if state.iteration % config.eval_every == 0:
            extra = tuple(monitor(state)) if monitor is not None else ()
            state.history.append((state.iteration, *(comps[k] for k in COMPONENTS), total,
                                  state.theta3, *extra))
        state.set_flat(state.optimizer.step(state.flat(), grad))
        state.iteration += 1
    return state


def _abort(state, config, total) -> TrainingAborted:
    path = None
    if config.dump_dir is not None:
        os.makedirs(config.dump_dir, exist_ok=True)
        path = os.path.join(config.dump_dir, f"abort_{state.iteration}.ckpt")
        state.save(path, {"seed": config.seed})
    return TrainingAborted(f"non-finite loss {total!r} at iteration {state.iteration}",
                           state, path)
