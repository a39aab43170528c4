import json

import numpy as np
import pytest

from ergodic_mfc import model, sde
from ergodic_mfc.model import ProblemSpec
from ergodic_mfc.sde import SimConfig

def zero_control(x):
    return np.zeros_like(x)


@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(horizon=1.0, burn_in=1.0), dict(burn_in=-1.0),
                                dict(n_particles=0), dict(bins=0), dict(record_every=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_brownian_motion_histogram_uniform():
    cfg = SimConfig(n_particles=2000, dt=1e-2, horizon=10.0, burn_in=0.0, bins=20, seed=1,
                    record_every=10)
    res = sde.simulate(ProblemSpec(d=1), zero_control, cfg)
    n = cfg.n_particles * res.n_steps
    sigma = np.sqrt(0.05 * 0.95 / n)
    assert np.all(np.abs(res.mass - 0.05) < 3 * sigma)


def test_mass_sums_to_one_and_shapes():
    spec, _ = model.testcase(5, 2)
    cfg = SimConfig(n_particles=50, dt=1e-2, horizon=1.0, burn_in=0.5, bins=7)
    res = sde.simulate(spec, zero_control, cfg)
    assert res.mass.shape == (7, 7) and res.mass.sum() == pytest.approx(1.0, abs=1e-15)
    assert res.n_steps == 50
    assert res.bin_centers().shape == (49, 2)
    assert res.density.sum() / 49 == pytest.approx(1.0)


def test_gibbs_histogram_small_run():
    spec = ProblemSpec(d=1)
    h = model.sum_of_sines(2.0)
    cfg = SimConfig(n_particles=500, dt=2e-3, horizon=40.0, burn_in=2.0, bins=50, seed=3)
    res = sde.simulate(spec, lambda x: 0.5 * h.grad(x), cfg)
    gibbs = model.GibbsField(h, model.torus_mean(lambda x: np.exp(h.value(x)), 1, 1024))
    assert sde.total_variation(res, gibbs) < 0.05


def test_total_variation_of_reference_against_itself():
    dens = model.GibbsField(model.sum_of_sines(1.0), 1.0)
    centers = (np.arange(40) + 0.5) / 40
    fine = np.array([dens(((np.arange(64) + 0.5) / 64 / 40 + c - 0.5 / 40)[:, None]).mean()
                     for c in centers])
    res = sde.SimResult(1, 40, fine / fine.sum(), 0.0, 1, SimConfig())
    assert sde.total_variation(res, dens, sub=64) < 1e-12
    uniform = sde.SimResult(1, 40, np.full(40, 1 / 40), 0.0, 1, SimConfig())
    assert sde.total_variation(uniform, lambda x: np.ones(len(x))) < 1e-15


def test_total_variation_decreases_with_horizon():
    spec = ProblemSpec(d=1)
    h = model.sum_of_sines(2.0)
    gibbs = model.GibbsField(h, model.torus_mean(lambda x: np.exp(h.value(x)), 1, 1024))
    tv = np.zeros(3)
    for seed in range(5):
        for k, T in enumerate((5.0, 10.0, 20.0)):
            # small step so the histogram noise, not the time-step bias, dominates
            cfg = SimConfig(n_particles=50, dt=5e-4, horizon=T, burn_in=1.0, bins=50, seed=seed,
                            record_every=5)
            tv[k] += sde.total_variation(sde.simulate(spec, lambda x: 0.5 * h.grad(x), cfg), gibbs)
    assert tv[0] >= tv[1] >= tv[2]


def test_cost_readout_constant_terms():
    spec = ProblemSpec(d=1, f_tilde0=model.constant_field(0.7),
                       f_tilde2=lambda x, xi: np.full(len(x), 1.1))
    cfg = SimConfig(n_particles=100, dt=1e-2, horizon=1.0, burn_in=0.0, bins=10)
    res = sde.simulate(spec, lambda x: np.full_like(x, 2.0), cfg)
    assert res.time_avg_cost == pytest.approx(0.5 * 4 + 0.7 + 1.1, abs=1e-12)


def test_local_coupling_from_histogram():
    spec = ProblemSpec(d=1, coupling=model.Coupling("quadratic", 1.0))
    cfg = SimConfig(n_particles=400, dt=1e-2, horizon=5.0, burn_in=0.0, bins=10, seed=2)
    res = sde.simulate(spec, zero_control, cfg)
    expected = float((res.mass * (res.mass * 10) ** 2).sum())
    assert res.time_avg_cost == pytest.approx(expected, rel=1e-12)
    assert res.time_avg_cost == pytest.approx(1.0, abs=0.01)


def test_deterministic_given_seed():
    spec, _ = model.testcase(4, 1)
    cfg = SimConfig(n_particles=30, dt=1e-2, horizon=2.0, burn_in=0.5, bins=10, seed=4)
    ctl = lambda x: model.sum_of_sines().grad(x)  # noqa: E731
    a, b = sde.simulate(spec, ctl, cfg), sde.simulate(spec, ctl, cfg)
    assert a.time_avg_cost == b.time_avg_cost
    np.testing.assert_array_equal(a.mass, b.mass)


def test_record_every_thins_readout():
    spec, _ = model.testcase(4, 1)
    cfg = SimConfig(n_particles=10, dt=1e-2, horizon=1.0, burn_in=0.2, bins=5, record_every=4)
    assert sde.simulate(spec, zero_control, cfg).n_steps == 20


def test_outputs(tmp_path):
    cfg = SimConfig(n_particles=20, dt=1e-2, horizon=1.0, burn_in=0.0, bins=4)
    res = sde.simulate(model.testcase(5, 2)[0], zero_control, cfg)
    res.to_csv(tmp_path / "h.csv")
    res.to_json(tmp_path / "s.json")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "bin_center_1,bin_center_2,mass" and len(lines) == 17
    summary = json.loads((tmp_path / "s.json").read_text())
    assert summary["time_avg_cost"] == res.time_avg_cost and summary["config"]["bins"] == 4
