"""Sweeps over the thickness ``h``, the scaling fit and the bounds table."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analytic import ClosedFormEnergies, competitor_energy_closed_form
from .diagnostics import bending_lb_certificate, classify_angles
from .energy import EnergyBreakdown
from .grid import DEFAULT_ALPHA, _radial_nodes, build_grid, build_spec
from .minimize import MinimizeOptions, MinimizeResult, minimize

__all__ = [
    "ResolutionPolicy",
    "SweepOptions",
    "SweepRecord",
    "ScalingFit",
    "run_single",
    "run_sweep",
    "fit_scaling",
    "bounds_report",
    "write_sweep_csv",
    "write_sweep_json",
    "write_sweep_svg",
    "DEFAULT_H_LIST",
]

logger = logging.getLogger(__name__)

DEFAULT_H_LIST = (0.2, 0.14, 0.1, 0.07, 0.05, 0.035, 0.02)


@dataclass(frozen=True)
class ResolutionPolicy:
    """Grid choice per ``h``.

    Radial nodes run from ``r_first = h * r_first_factor`` to 1 with ``n_r``
    rings, raised if needed so that at least ``cells_per_h`` radial cells lie
    inside ``r < h``; ``n_r`` and ``n_phi`` are capped. ``ratio`` is passed to
    :func:`~fvkcone.grid.build_grid` (the crossover radius for log-linear
    grading).
    """

    cells_per_h: int = 8
    n_r: int = 96
    n_phi: int = 48
    max_n_r: int = 512
    max_n_phi: int = 256
    grading: str = "loglinear"
    ratio: float | None = 0.1
    r_first_factor: float = 1.0 / 32.0

    def __post_init__(self):
        if self.cells_per_h < 1 or self.n_r < 8 or self.n_phi < 8:
            raise ValueError("cells_per_h >= 1 and n_r, n_phi >= 8 required")
        if not 0.0 < self.r_first_factor <= 0.25:
            raise ValueError("r_first_factor must lie in (0, 1/4]")
        if self.grading not in ("uniform", "geometric", "loglinear"):
            raise ValueError(f"unknown grading {self.grading!r}")

    def _cells_below_h(self, h: float, n_r: int) -> int:
        r = _radial_nodes(h * self.r_first_factor, 1.0, n_r, self.grading, self.ratio)
        return int(np.sum(r < h)) - 1

    def grid_params(self, h: float) -> dict:
        n_r = self.n_r
        while n_r < self.max_n_r and self._cells_below_h(h, n_r) < self.cells_per_h:
            n_r += 1
        n_r = min(n_r, self.max_n_r)
        return {"n_r": n_r, "n_phi": min(self.n_phi, self.max_n_phi),
                "grading": self.grading, "ratio": self.ratio,
                "r_first": h * self.r_first_factor}

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SweepOptions:
    """Settings shared by every run of a sweep.

    ``penalty_scale`` sets the convexity penalty weight to ``penalty_scale * h^2``
    so that the penalty keeps the same weight relative to the bending term
    across ``h``. ``beta``/``h_star`` override the proof scales (the defaults
    are rejected at moderate ``h``).
    """

    alpha: float = DEFAULT_ALPHA
    beta: float | None = None
    h_star: float | None = 0.25
    penalty_scale: float = 1e5
    max_iters: int = 200
    grad_tol: float = 1e-6
    refresh: int = 1
    n_samples: int = 64

    def resolved_beta(self) -> float:
        return self.alpha / 4 if self.beta is None else self.beta

    def to_dict(self) -> dict:
        return dict(self.__dict__, beta=self.resolved_beta())


@dataclass
class SweepRecord:
    h: float
    n_r: int
    n_phi: int
    energy: EnergyBreakdown | None
    competitor: ClosedFormEnergies
    bad_fraction: float
    certificate: float
    min_eig: float
    iterations: int
    converged: bool
    failed: bool
    message: str
    wall_time: float
    alpha: float = DEFAULT_ALPHA
    result: MinimizeResult | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.energy is not None and not self.failed

    @property
    def e_min(self) -> float:
        """Energy of the computed state (membrane + bending, penalty excluded)."""
        if self.energy is None:
            return float("nan")
        return self.energy.membrane + self.energy.bending

    def row(self) -> dict:
        e = self.energy
        a, h = self.alpha, self.h
        return {
            "h": self.h, "n_r": self.n_r, "n_phi": self.n_phi,
            "membrane": e.membrane if e else math.nan,
            "bending": e.bending if e else math.nan,
            "penalty": e.penalty if e else math.nan,
            "e_min": self.e_min,
            "e_min_scaled": self.e_min / (2 * a * h * h),
            "competitor_total": self.competitor.total,
            "competitor_stated_bending": self.competitor.stated_bending,
            "bad_fraction": self.bad_fraction, "certificate": self.certificate,
            "certificate_h2": self.certificate * h * h,
            "min_eig": self.min_eig, "iterations": self.iterations,
            "converged": self.converged, "failed": self.failed, "message": self.message,
            "wall_time": self.wall_time,
        }


def run_single(h: float, policy: ResolutionPolicy = ResolutionPolicy(),
               options: SweepOptions = SweepOptions(), keep_result: bool = False) -> SweepRecord:
    """Minimize at one ``h`` and collect the record (solver failures are recorded)."""
    t0 = time.perf_counter()
    spec = build_spec(options.alpha, h, beta=options.resolved_beta(), h_star=options.h_star)
    gp = policy.grid_params(h)
    grid = build_grid(spec, gp["n_r"], gp["n_phi"], grading=gp["grading"], ratio=gp["ratio"],
                      r_first=gp["r_first"])
    comp = competitor_energy_closed_form(h, options.alpha)
    mopts = MinimizeOptions(max_iters=options.max_iters, grad_tol=options.grad_tol,
                            refresh=options.refresh, penalty_weight=options.penalty_scale * h * h)
    try:
        res = minimize(spec, grid, options=mopts)
    except Exception as exc:  # recorded, the sweep continues
        logger.warning("h=%g failed: %s", h, exc)
        return SweepRecord(h=h, n_r=grid.n_r, n_phi=grid.n_phi, energy=None, competitor=comp,
                           bad_fraction=math.nan, certificate=math.nan, min_eig=math.nan,
                           iterations=0, converged=False, failed=True, message=str(exc),
                           wall_time=time.perf_counter() - t0, alpha=options.alpha)
    u, v = res.fields
    ghost = res.dofs.layout.v_ghost
    bad = classify_angles(v, grid, spec, options.n_samples, ghost_values=ghost)
    cert = bending_lb_certificate(v, grid, spec, ghost_values=ghost)
    return SweepRecord(h=h, n_r=grid.n_r, n_phi=grid.n_phi, energy=res.energy, competitor=comp,
                       bad_fraction=bad.bad_fraction, certificate=cert, min_eig=res.min_eig,
                       iterations=res.iterations, converged=res.converged, failed=res.failed,
                       message=res.message, wall_time=time.perf_counter() - t0,
                       alpha=options.alpha, result=res if keep_result else None)


def _run_single_args(args):
    return run_single(*args)


def run_sweep(h_list, policy: ResolutionPolicy = ResolutionPolicy(),
              options: SweepOptions = SweepOptions(), workers: int = 1,
              keep_results: bool = False) -> list:
    """One :class:`SweepRecord` per ``h`` (strictly decreasing, each in (0, 1))."""
    hs = [float(h) for h in h_list]
    if not hs:
        raise ValueError("h_list is empty")
    if any(not 0.0 < h < 1.0 for h in hs):
        raise ValueError("every h must lie in (0, 1)")
    if any(b >= a for a, b in zip(hs, hs[1:])):
        raise ValueError("h_list must be strictly decreasing")
    jobs = [(h, policy, options, keep_results) for h in hs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_run_single_args, jobs))
    records = []
    for job in jobs:
        rec = run_single(*job)
        logger.info("h=%g E/(2 alpha h^2)=%.4f (%s, %.1fs)", rec.h,
                    rec.e_min / (2 * options.alpha * rec.h**2), rec.message, rec.wall_time)
        records.append(rec)
    return records


@dataclass(frozen=True)
class ScalingFit:
    """OLS fit ``E_min / h^2 = slope * log(1/h) + intercept``."""

    slope: float
    intercept: float
    r2: float
    residuals: tuple
    n_points: int
    alpha: float

    @property
    def slope_ratio(self) -> float:
        """Slope divided by the predicted ``2 alpha``."""
        return self.slope / (2 * self.alpha)

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2,
                "residuals": list(self.residuals), "n_points": self.n_points,
                "predicted_slope": 2 * self.alpha, "slope_ratio": self.slope_ratio}


def fit_scaling(records, alpha: float | None = None) -> ScalingFit:
    """Least-squares line through ``(log(1/h), E_min/h^2)`` of the successful records."""
    good = [r for r in records if r.ok and math.isfinite(r.e_min)]
    if len(good) < 4:
        raise ValueError(f"need at least 4 successful records, got {len(good)}")
    x = np.array([math.log(1 / r.h) for r in good])
    y = np.array([r.e_min / r.h**2 for r in good])
    if x.max() - x.min() < 0.5:
        raise ValueError("log(1/h) range is below 0.5; the fit is degenerate")
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(res**2)) / ss_tot if ss_tot > 0 else 1.0
    a = good[0].alpha if alpha is None else alpha
    return ScalingFit(slope=float(slope), intercept=float(intercept), r2=r2,
                      residuals=tuple(float(t) for t in res), n_points=len(good), alpha=a)


def bounds_report(records, fit: ScalingFit | None = None) -> list:
    """Per-``h`` table of the implied upper and lower constants.

    ``C_upper = E_min/(2 alpha h^2) - log(1/h)`` and
    ``C_lower = (log(1/h) - E_min/(2 alpha h^2)) / log log(1/h)`` (``nan`` when
    ``log log(1/h) <= 0``).
    """
    rows = []
    for r in records:
        lg = math.log(1 / r.h)
        ll = math.log(lg) if lg > 1 else math.nan
        scaled = r.e_min / (2 * r.alpha * r.h**2)
        comp_scaled = r.competitor.total / (2 * r.alpha * r.h**2)
        row = {"h": r.h, "e_scaled": scaled, "log_inv_h": lg, "loglog_inv_h": ll,
               "C_upper": scaled - lg,
               "C_lower": (lg - scaled) / ll if ll > 0 else math.nan,
               "competitor_C_upper": comp_scaled - lg}
        if fit is not None:
            row["fit_residual"] = r.e_min / r.h**2 - (fit.slope * lg + fit.intercept)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# output


def write_sweep_csv(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for r in records]
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        for row in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def write_sweep_json(records, fit: ScalingFit | None, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = dict(extra or {})
    doc.update({"records": [r.row() for r in records],
                "fit": None if fit is None else fit.to_dict(),
                "bounds": bounds_report(records, fit)})
    path.write_text(json.dumps(doc, indent=2, allow_nan=True))
    return path


def write_sweep_svg(records, fit: ScalingFit | None, path, width: int = 640,
                    height: int = 440) -> Path:
    """Self-contained SVG of ``E_min/(2 alpha h^2)`` against ``log(1/h)``.

    Shows the data points, the fitted line, the competitor curve and the
    reference line ``log(1/h)``.
    """
    good = [r for r in records if r.ok]
    if not good:
        raise ValueError("no successful records to plot")
    alpha = good[0].alpha
    xs = np.array([math.log(1 / r.h) for r in good])
    ys = np.array([r.e_min / (2 * alpha * r.h**2) for r in good])
    cs = np.array([r.competitor.total / (2 * alpha * r.h**2) for r in good])
    x0, x1 = float(xs.min()) - 0.1, float(xs.max()) + 0.1
    lines = {"competitor": cs, "log(1/h)": xs}
    if fit is not None:
        lines["fit"] = (fit.slope * xs + fit.intercept) / (2 * alpha)
    allv = np.concatenate([ys] + list(lines.values()))
    y0, y1 = 0.0, float(allv.max()) * 1.1
    ml, mr, mt, mb = 60, 20, 20, 50

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
           f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>']
    for t in np.linspace(x0, x1, 6):
        out.append(f'<text x="{px(t):.1f}" y="{height - mb + 16}" text-anchor="middle">{t:.2f}</text>')
    for t in np.linspace(y0, y1, 6):
        out.append(f'<text x="{ml - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.2f}</text>')
    out.append(f'<text x="{(ml + width - mr) / 2}" y="{height - 12}" text-anchor="middle">log(1/h)</text>')
    out.append(f'<text x="14" y="{(mt + height - mb) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {(mt + height - mb) / 2})">E / (2 alpha h^2)</text>')
    styles = {"competitor": "#d62728", "log(1/h)": "#7f7f7f", "fit": "#1f77b4"}
    for k, (name, vals) in enumerate(lines.items()):
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, vals))
        dash = ' stroke-dasharray="5,4"' if name != "fit" else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{styles[name]}" '
                   f'stroke-width="1.5"{dash}/>')
        out.append(f'<text x="{ml + 10}" y="{mt + 14 * (k + 1)}" fill="{styles[name]}">{name}</text>')
    for x, y in zip(xs, ys):
        out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3.5" fill="black"/>')
    out.append(f'<text x="{ml + 10}" y="{mt + 14 * (len(lines) + 1)}">minimizers</text>')
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(out) + "\n")
    return path
