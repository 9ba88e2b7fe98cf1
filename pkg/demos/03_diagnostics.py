"""Diagnostics on the competitor and on a paraboloid.

Traces constant-slope curves, classifies angles, measures the gradient image
in two ways and evaluates the W^{-2,2} margin check.
"""

import math

import numpy as np

from fvkcone import analytic, diagnostics, grid

ALPHA = math.pi / 4
spec = grid.build_spec(ALPHA, 0.1, beta=ALPHA / 4, h_star=0.25)
g = grid.build_grid(spec, 128, 64, "uniform", r_first=spec.h / 4)
ghost = np.full(g.n_phi, g.r_ghost)
_, v = analytic.competitor_fields(g, spec.h)

rep = diagnostics.classify_angles(v, g, spec, ghost_values=ghost)
print(f"competitor bad fraction {rep.bad_fraction} over {rep.angles.size} angles")
para = diagnostics.classify_angles(0.5 * g.R**2, g, spec)
print(f"paraboloid bad fraction {para.bad_fraction}")

area = diagnostics.gradient_image_area(v, g, ghost_values=ghost)
print(f"gradient image area: det {area.det_estimate:.4f}, raster {area.raster_estimate:.4f}, "
      f"exact for the truncated tip {ALPHA * (1 - (g.r_first / spec.h) ** 2):.4f}")

lengths = diagnostics.slope_curve_lengths(g.R.copy(), g, spec, ghost_values=ghost)
print(f"cone slope-curve length {lengths[0].length:.4f} = 2 alpha - 2 beta "
      f"{2 * ALPHA - 2 * spec.beta:.4f}")

ma = diagnostics.monge_ampere_check(v, g, eps=spec.h, ghost_values=ghost)
print(f"margin check at eps = h: LHS {ma.lhs:.3f} vs 2 alpha log(1/eps) {ma.leading:.3f}")
