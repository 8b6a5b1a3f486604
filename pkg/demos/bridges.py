"""Rejection-sampled bridges and their concentration around the geodesic.

    python3 demos/bridges.py
"""
import numpy as np

from srlab import concentration_curve, fdd_consistency, flat_torus, heisenberg, sample_bridges

flat = flat_torus(1, 20.0)
b = sample_bridges(flat, [0.0], [0.0], eps=0.5, delta=0.05, N_target=500, budget=10 ** 5, level=6)
print(f"flat circle: acceptance {b.acceptance_rate:.4f} (Gaussian value 0.0797), {b.proposals} proposals")

rep = fdd_consistency(flat, [0.0], [0.0], 0.5, delta=0.02, N=2000, level=6)
print(f"midpoint law vs exact bridge: KS = {rep.ks_stat:.4f} (threshold {rep.threshold})")

t = np.linspace(0, 1, 3)
rows = concentration_curve(flat, [0.0], [0.5], [0.5, 0.35, 0.25], N_target=200, level=6,
                           geodesic=(t, 0.5 * t[:, None]))
print("flat ladder, median sup-distance to the line:", [round(r.median_sup_dist, 3) for r in rows])

# (0, 0, z) is fixed by rotations, so distances are taken to the whole orbit of minimisers
rows = concentration_curve(heisenberg(), np.zeros(3), [0.0, 0.0, 0.02], [0.5, 0.35], N_target=100, level=6)
print("Heisenberg ladder, median sup-distance to the minimisers:", [round(r.median_sup_dist, 3) for r in rows])
