"""Scaling sweep over h and the least-squares fit of E_min/h^2 against log(1/h).

A reduced version of the acceptance sweep (coarser grids and fewer iterations)
that finishes in a few minutes. Outputs go to demos_out/.
"""

import logging
import math

from fvkcone import sweep

logging.basicConfig(level=logging.INFO, format="%(message)s")
policy = sweep.ResolutionPolicy(n_r=48, n_phi=24)
options = sweep.SweepOptions(max_iters=100)
records = sweep.run_sweep(sweep.DEFAULT_H_LIST, policy, options)
fit = sweep.fit_scaling(records)
print(f"slope {fit.slope:.4f} = {fit.slope_ratio:.3f} x 2 alpha (r^2 {fit.r2:.4f})")
for row in sweep.bounds_report(records, fit):
    print(f"h={row['h']:<6g} E/(2 alpha h^2) {row['e_scaled']:.4f}  log(1/h) "
          f"{row['log_inv_h']:.4f}  C_upper {row['C_upper']:.4f}")
sweep.write_sweep_csv(records, "demos_out/sweep.csv")
sweep.write_sweep_json(records, fit, "demos_out/sweep.json")
sweep.write_sweep_svg(records, fit, "demos_out/sweep.svg")
print("wrote demos_out/sweep.{csv,json,svg}; alpha =", math.pi / 4)
