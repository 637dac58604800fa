"""Assemble the sparse operator and solve the screened Poisson problem.

The forward error measures consistency, max |L f - Lap f|; the inverse error
measures the solution, max |F - f| for (I - L) F = f - Lap f.
"""
from grbffd import MethodConfig, assemble, inf_norm_inverse, sample_points, solve_screened_poisson

cloud = sample_points("rbc2d", 4000, seed=0)
for cfg in (MethodConfig("gmls", k0=40), MethodConfig("grbffd", k0=40)):
    op = assemble(cloud, cfg)
    rep = solve_screened_poisson(op, cloud.h_values, f=cloud.f_values, lap_f=cloud.lap_values)
    norm = inf_norm_inverse(op).value
    print(f"{cfg.label:9s} mean K={op.k_final.mean():5.1f}  FE={rep.fe:.2e}  IE={rep.ie:.2e}  "
          f"||(I-L)^-1||={norm:.2f}  solver={rep.solver}")
