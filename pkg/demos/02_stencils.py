"""Nearest-neighbour stencils and their tangent-plane coordinates.

A stencil is the base point plus its K-1 nearest neighbours, projected on the
base tangent plane.  Its diameter D shrinks like (log N / N)^(1/d).
"""
import numpy as np

from grbffd import build_knn_index, diameter_statistics, knn, monge_project, sample_points

cloud = sample_points("rbc2d", 3200, seed=0)
index = build_knn_index(cloud)
st = monge_project(cloud, knn(index, 0, 40))
print(f"stencil at point 0: K={st.K}, diameter D={st.d_k_max:.4f}, radius R={st.r_k_max:.4f}")
print("first neighbours:", st.neighbors[:6])
print("tangent coordinates of the base:", st.theta[0])

Ns = [2000, 4000, 8000, 16000]
stats = diameter_statistics("flat_torus3d", Ns, 20, trials=1)
print("\nflat_torus3d, K=20")
for s in stats:
    print(f"  N={s['N']:6d}  median D={s['median']:.4f}  std={s['std']:.4f}")
x = np.log(Ns) / np.array(Ns)
slope = np.polyfit(np.log(x), np.log([s["median"] for s in stats]), 1)[0]
print(f"slope of log D against log(log N / N): {slope:.3f} (1/d = {1 / 3:.3f})")
