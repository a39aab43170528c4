"""Deep Galerkin solve of the stationary MFG (test case 3) against the FD benchmark.

The FD solver gives the reference density; DGM trains two nets (log-density
and adjoint) plus the scalar lambda on the residuals of the coupled system.
"""
from ergodic_mfc import bench, dgm, model, net

spec, _ = model.testcase(3, 1)
fd = bench.solve_fd(spec, bench.Grid1D(512))
print(f"FD: lambda {fd.lam:.5f} after {fd.iterations} fixed-point steps")

arch = net.NetworkArch((1, 20, 1))
cfg = dgm.DgmConfig(iterations=30_000, n_interior=500, w_fp=0.1, w_hjb=1.0,
                    w_normalization=10.0, w_p_mean=1.0, lr=1e-2, lr_decay=1e-4,
                    eval_every=3000)
state = dgm.train_dgm(spec, arch, arch, cfg,
                      monitor=lambda s: (bench.relative_l2(s.nu, fd.nu_field(), 20_000),))
print(f"{'iter':>6} {'total':>10} {'lambda':>9} {'err nu':>8}")
for row in state.history:
    print(f"{row[0]:6d} {row[-3]:10.4f} {row[-2]:9.4f} {row[-1]:8.4f}")
