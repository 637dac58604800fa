"""A small convergence study on the ellipse with fitted rates.

With fixed K=30 and degree 4 the errors decay like N^-3 (forward) and faster
for the solution.  RBF-FD on random points is shown for contrast: its inverse
norm grows with N.
"""
from grbffd import MethodConfig, convergence_sweep, fit_slope
from grbffd.verification import median_by_n

cfgs = [MethodConfig("gmls", auto=False, k_fixed=30), MethodConfig("grbffd", auto=False, k_fixed=30),
        MethodConfig("rbffd", auto=False, k_fixed=30)]
Ns = [400, 800, 1600, 3200]
recs = convergence_sweep("ellipse1d", cfgs, Ns, trials=2)
for cfg in cfgs:
    N, fe = median_by_n(recs, "FE", cfg.label)
    _, ie = median_by_n(recs, "IE", cfg.label)
    _, nrm = median_by_n(recs, "inf_norm_inv", cfg.label)
    print(f"{cfg.label:9s} FE slope {fit_slope(N, fe)[0]: .2f}  IE slope {fit_slope(N, ie)[0]: .2f}  "
          f"norm {nrm[0]:.2f} -> {nrm[-1]:.2f}")
