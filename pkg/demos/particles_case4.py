"""Particle check of the optimal feedback for test case 4 (d=1).

Simulates the controlled diffusion with drift grad h*/2 and compares the
long-run histogram with exp(h*)/Z and the time-averaged cost with quadrature.
"""
import numpy as np

from ergodic_mfc import bench, model, sde

spec, exact = model.testcase(4, 1)
J = bench.quadrature_cost(spec, exact.h, resolution=4096)
for dt in (4e-3, 2e-3, 1e-3):
    res = sde.simulate(spec, lambda x: 0.5 * exact.h.grad(x),
                       sde.SimConfig(n_particles=2000, dt=dt, horizon=20.0, burn_in=2.0,
                                     bins=50, record_every=2))
    print(f"dt={dt:.0e}: TV {sde.total_variation(res, exact.nu):.4f}, "
          f"cost {res.time_avg_cost:.4f} (quadrature {J:.4f})")
print("the cost gap shrinks roughly linearly in dt (Euler-Maruyama bias)")
print("histogram peak at x =", res.bin_centers()[np.argmax(res.mass), 0], "(exact: 0.25)")
