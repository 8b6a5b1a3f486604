"""Small-noise heat kernel on the flat circle against the exact Gaussian value.

The ladder is cheap (N = 20000, level 6); the acceptance suite repeats it
at N = 200000 and level 12.

    python3 demos/flat_varadhan.py
"""
import numpy as np

from srlab import flat_torus, ldp_curve, positivity

model = flat_torus(1, 20.0)
x, a = np.zeros(1), np.array([1.0])
rows = ldp_curve(model, x, a, [0.5, 0.35, 0.25], 20_000, level=6)
print(" eps   eps^2 log p_hat   exact    target")
for r in rows:
    print(f"{r.eps:5.2f}   {r.eps2logp:8.4f} +- {r.eps2logp_stderr:.4f}   {r.exact:8.4f}   {r.target:6.3f}")

rep = positivity(model, x, a, 0.35, 20_000, level=6)
print(f"p(eps=0.35) >= {rep.lower_bound:.4f} with 99% confidence: certified = {rep.certified}")
