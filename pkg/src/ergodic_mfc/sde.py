"""Particle simulation of the controlled dynamics on the torus.

``N`` particles follow ``dX = (b0 phi(X) + grad b_tilde(X)) dt + dW`` (Euler-
Maruyama, coordinates wrapped to [0, 1)).  After a burn-in ``T0`` the
positions are binned at every step and the running cost is averaged over
particles and time.  The drift does not depend on the particle law, so the
mean-field terms only enter the cost read-out:

* pairwise kernel: each particle is paired with a random other particle;
* local coupling: ``g`` is evaluated on the histogram accumulated over the
  whole averaging window, at the particle's bin.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .model import ProblemSpec, as_points


@dataclass(frozen=True)
class SimConfig:
    n_particles: int = 1000
    dt: float = 1e-3
    horizon: float = 200.0
    burn_in: float = 10.0
    bins: int = 100
    seed: int = 0
    record_every: int = 1  # read out cost and histogram every k-th step

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not self.horizon > self.burn_in >= 0:
            raise ValueError("need horizon > burn_in >= 0")
        if self.n_particles < 1 or self.bins < 1 or self.record_every < 1:
            raise ValueError("n_particles, bins and record_every must be >= 1")


@dataclass
class SimResult:
    d: int
    bins: int
    mass: np.ndarray  # shape (bins,) * d, sums to 1
    time_avg_cost: float
    n_steps: int
    config: SimConfig

    @property
    def density(self) -> np.ndarray:
        """Histogram heights (mass divided by bin volume)."""
        return self.mass * self.bins**self.d

    def bin_centers(self) -> np.ndarray:
        c = (np.arange(self.bins) + 0.5) / self.bins
        grids = np.meshgrid(*([c] * self.d), indexing="ij")
        return np.stack(grids, axis=-1).reshape(-1, self.d)

    def to_csv(self, path) -> None:
        """Columns: bin_center_1, ..., bin_center_d, mass."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"bin_center_{i + 1}" for i in range(self.d)] + ["mass"])
            for row in np.column_stack([self.bin_centers(), self.mass.ravel()]):
                w.writerow([f"{v:.17g}" for v in row])

    def summary(self) -> dict:
        return {"time_avg_cost": self.time_avg_cost, "n_steps": self.n_steps,
                "d": self.d, "bins": self.bins, "config": asdict(self.config)}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _bin_index(x: np.ndarray, bins: int) -> np.ndarray:
    idx = np.minimum((x * bins).astype(np.int64), bins - 1)
    return np.ravel_multi_index(tuple(idx.T), (bins,) * x.shape[1])


def simulate(spec: ProblemSpec, control: Callable[[np.ndarray], np.ndarray],
             cfg: SimConfig) -> SimResult:
    """Euler-Maruyama run; returns the time-averaged histogram and cost.

    ``control`` maps points (N, d) to controls (N, d).  The time average is
    over the steps ``k >= T0 / dt`` with ``(k - T0 / dt) % record_every == 0``.
    """
    rng = np.random.default_rng(cfg.seed)
    d, N = spec.d, cfg.n_particles
    n_steps = int(round(cfg.horizon / cfg.dt))
    n_burn = int(round(cfg.burn_in / cfg.dt))
    sq = np.sqrt(cfg.dt)
    x = rng.random((N, d))
    noise = np.empty((N, d))
    counts = np.zeros(cfg.bins**d)
    nonlocal_cost = 0.0
    recorded = 0
    for k in range(n_steps):
        a = np.asarray(control(x), dtype=float).reshape(N, d)
        if k >= n_burn and (k - n_burn) % cfg.record_every == 0:
            c = 0.5 * (a * a).sum(axis=1) + spec.f_tilde0.value(x)
            if spec.f_tilde2 is not None:
                partner = x[rng.permutation(N)]
                c = c + spec.f_tilde2(x, partner)
            nonlocal_cost += float(c.mean())
            counts += np.bincount(_bin_index(x, cfg.bins), minlength=counts.size)
            recorded += 1
        # in-place update; same random stream as drawing a fresh (N, d) array
        drift = spec.b0 * a + spec.b_tilde.grad(x)
        drift *= cfg.dt
        rng.standard_normal(out=noise)
        noise *= sq
        x += drift
        x += noise
        x -= np.floor(x)
        x[x >= 1.0] = 0.0  # tiny negatives round up to 1.0
    mass = counts / counts.sum()
    cost = nonlocal_cost / recorded
    if spec.coupling.kind != "none":
        occupied = mass > 0
        dens = mass[occupied] * cfg.bins**d
        cost += float((mass[occupied] * spec.coupling.g(dens)).sum())
    return SimResult(d, cfg.bins, mass.reshape((cfg.bins,) * d), cost, recorded, cfg)


def total_variation(result: SimResult, density: Callable[[np.ndarray], np.ndarray],
                    sub: int = 8) -> float:
    """TV distance between the histogram and a density integrated per bin.

    Each bin integral uses the midpoint rule on ``sub**d`` sub-cells; the
    reference masses are renormalized to sum to one.
    """
    d, nb = result.d, result.bins
    fine = nb * sub
    pts = (np.arange(fine) + 0.5) / fine
    grid = np.stack(np.meshgrid(*([pts] * d), indexing="ij"), axis=-1).reshape(-1, d)
    vals = np.asarray(density(as_points(grid)), dtype=float).reshape((fine,) * d)
    for axis in range(d):
        shape = vals.shape[:axis] + (nb, sub) + vals.shape[axis + 1:]
        vals = vals.reshape(shape).sum(axis=axis + 1)
    ref = vals / vals.sum()
    return 0.5 * float(np.abs(ref - result.mass).sum())
