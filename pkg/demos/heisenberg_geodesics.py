"""Distances, minimisers and the Malliavin determinant on the Heisenberg group.

    python3 demos/heisenberg_geodesics.py
"""
import math

import numpy as np

from srlab import FramePoint, PiecewiseLinearPath, heisenberg, malliavin_cov, rate_J, sr_distance

model = heisenberg()
origin = np.zeros(3)

for target in ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.0, 0.05]):
    a = np.array(target)
    res = sr_distance(model, origin, a, n_starts=8)
    exact = model.distance_oracle(origin, a)
    print(f"a = {target}: d_SR = {res.d_sr:.5f} (closed form {exact:.5f}), "
          f"endpoint error {res.constraint_violation:.1e}")

    # the minimiser is a regular point of the endpoint map
    cov = malliavin_cov(model, FramePoint.identity(model, origin), res.h_star)
    print(f"    det Gamma at the minimiser = {cov.det:.4e}, JK residual {cov.jk_residual:.1e}")

# J is zero on true minimisers (here up to the 32-piece discretisation) and
# positive on longer admissible paths
a = np.array([0.0, 0.0, 1.0])
best = sr_distance(model, origin, a, n_starts=8)
print(f"J(numerical minimiser) = {rate_J(model, origin, a, h=best.h_star).J:.2e}")
# an ellipse enclosing unit area reaches the same endpoint with more energy
rho = 1 / math.sqrt(math.pi)
t = (np.arange(1024) + 0.5) / 1024
ellipse = PiecewiseLinearPath.from_velocities(
    2 * math.pi * np.stack([2 * rho * np.cos(2 * math.pi * t), 0.5 * rho * np.sin(2 * math.pi * t)], axis=1))
print(f"J(ellipse of unit area) = {rate_J(model, origin, a, h=ellipse).J:.4f} (exact {math.pi * 4.25 - 2 * math.pi:.4f})")
