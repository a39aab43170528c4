"""Direct minimization on test case 4 (d=1) and comparison with the closed form.

Trains a small trig-embedded net on the Gibbs-reparametrized cost, then
reads off (p, nu, lambda) and prints the relative L2 errors as training
progresses.  Runs in about a minute on one core.
"""
import numpy as np

from ergodic_mfc import algo1, bench, model, net

spec, exact = model.testcase(4, 1)
arch = net.NetworkArch((1, 20, 1))


def errors(theta):
    rep = algo1.recover_solution(spec, arch, theta, 512)
    return (bench.relative_l2(rep.p_field, exact.p, 20_000),
            bench.relative_l2(rep.nu_field, exact.nu, 20_000))


cfg = algo1.TrainConfig(iterations=10_000, L=1000, Q=1000, lr=1e-2, lr_decay=5e-4,
                        eval_every=1000)
state = algo1.train(spec, arch, cfg, monitor=errors)
print(f"{'iter':>6} {'loss':>10} {'err p':>8} {'err nu':>8}")
for it, loss, ep, en in state.history:
    print(f"{it:6d} {loss:10.4f} {ep:8.4f} {en:8.4f}")

rep = algo1.recover_solution(spec, arch, state.theta, 512)
print(f"lambda: learned {rep.lam:.5f}, exact {exact.lam:.5f}")
print(f"cost of the learned field {bench.quadrature_cost(spec, net.NetField(arch, state.theta)):.5f}"
      f", optimum {bench.quadrature_cost(spec, exact.h):.5f}")
print("max |nu - exact| on the grid:", np.abs(rep.nu - exact.nu(rep.x)).max())
