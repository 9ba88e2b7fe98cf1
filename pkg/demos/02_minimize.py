"""Minimize the energy at one thickness and inspect the result.

Starts from the competitor, runs the Gauss-Newton seeded quasi-Newton solver
with the convexity penalty and prints the energy split, the convexity
certificate and the bending lower bound from the gradient-curve lengths.
"""

import math

from fvkcone import analytic, diagnostics, grid
from fvkcone.minimize import MinimizeOptions, certify, minimize

ALPHA = math.pi / 4
h = 0.1
spec = grid.build_spec(ALPHA, h, beta=ALPHA / 4, h_star=0.25)
g = grid.build_grid(spec, 64, 32, "loglinear")
opts = MinimizeOptions(max_iters=100, penalty_weight=1e5 * h * h)
res = minimize(spec, g, options=opts)

scale = 2 * ALPHA * h * h
cf = analytic.competitor_energy_closed_form(h, ALPHA)
print(f"{res.message} after {res.iterations} iterations")
print(f"E/(2 alpha h^2): minimizer {(res.energy.membrane + res.energy.bending) / scale:.4f}, "
      f"competitor {cf.total / scale:.4f}, log(1/h) {math.log(1 / h):.4f}")
print(f"membrane {res.energy.membrane:.3e}  bending {res.energy.bending:.3e}  "
      f"penalty {res.energy.penalty:.3e}")
print("convexity:", certify(res).to_dict())
_, v = res.fields
cert = diagnostics.bending_lb_certificate(v, g, spec, ghost_values=res.dofs.layout.v_ghost)
print(f"h^2 * certificate {h * h * cert:.3e} <= E_min {res.energy.membrane + res.energy.bending:.3e}")
