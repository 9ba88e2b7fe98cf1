import json
import math

import numpy as np
import pytest

from fvkcone.analytic import competitor_energy_closed_form
from fvkcone.energy import EnergyBreakdown
from fvkcone.grid import build_grid, build_spec
from fvkcone.sweep import (DEFAULT_H_LIST, ResolutionPolicy, SweepOptions, SweepRecord,
                           bounds_report, fit_scaling, run_single, run_sweep, write_sweep_csv,
                           write_sweep_json, write_sweep_svg)

ALPHA = math.pi / 4


def synthetic(hs, law, alpha=ALPHA):
    """Records whose membrane + bending equals ``law(h)``."""
    out = []
    for h in hs:
        e = EnergyBreakdown(membrane=0.0, bending=law(h), penalty=0.0, h=h)
        out.append(SweepRecord(h=h, n_r=8, n_phi=8, energy=e,
                               competitor=competitor_energy_closed_form(h, alpha),
                               bad_fraction=0.0, certificate=0.0, min_eig=0.0, iterations=1,
                               converged=True, failed=False, message="synthetic",
                               wall_time=0.0, alpha=alpha))
    return out


def test_exact_law_fit():
    recs = synthetic(DEFAULT_H_LIST, lambda h: 2 * ALPHA * h**2 * (math.log(1 / h) + 1))
    fit = fit_scaling(recs)
    assert fit.slope == pytest.approx(2 * ALPHA, rel=1e-12)
    assert fit.intercept == pytest.approx(2 * ALPHA, rel=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12) and fit.n_points == 7
    assert fit.slope_ratio == pytest.approx(1.0, rel=1e-12)
    rows = bounds_report(recs, fit)
    assert all(r["C_upper"] == pytest.approx(1.0, rel=1e-12) for r in rows)
    assert all(abs(r["fit_residual"]) < 1e-12 for r in rows)


def test_noisy_law_fit_matches_bruteforce():
    rng = np.random.default_rng(0)
    noise = dict(zip(DEFAULT_H_LIST, rng.uniform(-0.01, 0.01, len(DEFAULT_H_LIST))))
    law = lambda h: 2 * ALPHA * h**2 * (math.log(1 / h) + 1) * (1 + noise[h])  # noqa: E731
    fit = fit_scaling(synthetic(DEFAULT_H_LIST, law))
    assert abs(fit.slope_ratio - 1) < 0.05
    x = np.log(1 / np.array(DEFAULT_H_LIST))
    y = np.array([law(h) / h**2 for h in DEFAULT_H_LIST])
    slope, icpt = np.polyfit(x, y, 1)
    assert fit.slope == pytest.approx(slope, rel=1e-10)
    assert fit.intercept == pytest.approx(icpt, rel=1e-10)


def test_competitor_only_records_give_oracle_constant():
    recs = synthetic(DEFAULT_H_LIST, lambda h: competitor_energy_closed_form(h, ALPHA).total)
    for row in bounds_report(recs):
        assert row["C_upper"] == pytest.approx(row["competitor_C_upper"], rel=1e-12)
        assert row["C_upper"] == pytest.approx(1 + 1 / 6, rel=1e-12)


def test_fit_errors():
    law = lambda h: h**2  # noqa: E731
    with pytest.raises(ValueError):
        fit_scaling(synthetic((0.2, 0.1, 0.05), law))
    with pytest.raises(ValueError):
        fit_scaling(synthetic((0.2, 0.19, 0.18, 0.17), law))
    recs = synthetic(DEFAULT_H_LIST, law)
    for r in recs[:4]:
        r.failed = True
    with pytest.raises(ValueError):
        fit_scaling(recs)


def test_run_sweep_rejects_bad_lists():
    for hs in ([], [0.1, 0.2], [0.2, 1.0], [0.1, 0.1]):
        with pytest.raises(ValueError):
            run_sweep(hs)


@pytest.mark.parametrize("grading", ["geometric", "loglinear", "uniform"])
def test_resolution_policy_cells_per_h(grading):
    pol = ResolutionPolicy(n_r=16, n_phi=12, grading=grading, ratio=None)
    for h in DEFAULT_H_LIST:
        gp = pol.grid_params(h)
        g = build_grid(build_spec(ALPHA, h, beta=0.1, h_star=0.25), gp["n_r"], gp["n_phi"],
                       grading, r_first=gp["r_first"])
        assert np.sum(g.r < h) - 1 >= pol.cells_per_h
        assert gp["n_r"] <= pol.max_n_r


def test_resolution_policy_caps_and_errors():
    assert ResolutionPolicy(n_r=600).grid_params(0.1)["n_r"] == 512
    assert ResolutionPolicy(grading="uniform", max_n_r=100).grid_params(0.02)["n_r"] == 100
    with pytest.raises(ValueError):
        ResolutionPolicy(r_first_factor=0.5)
    with pytest.raises(ValueError):
        ResolutionPolicy(grading="chebyshev")


@pytest.fixture(scope="module")
def small_sweep():
    pol = ResolutionPolicy(n_r=24, n_phi=12)
    opts = SweepOptions(max_iters=40)
    return pol, opts, run_sweep((0.2, 0.14, 0.1, 0.07), pol, opts, keep_results=True)


def test_sweep_records_and_invariants(small_sweep):
    pol, opts, recs = small_sweep
    assert [r.h for r in recs] == [0.2, 0.14, 0.1, 0.07]
    for r in recs:
        assert r.ok and r.result is not None
        # starts at the competitor and descends
        assert r.e_min <= r.competitor.total + 1e-6 * r.h**2
        assert r.certificate * r.h**2 <= r.e_min
        assert 0.0 <= r.bad_fraction <= 1.0


def test_single_run_is_deterministic(small_sweep):
    pol, opts, recs = small_sweep
    again = run_single(0.14, pol, opts)
    a, b = recs[1].row(), again.row()
    a.pop("wall_time"), b.pop("wall_time")
    assert a == b


def test_writers(small_sweep, tmp_path):
    _, _, recs = small_sweep
    fit = fit_scaling(recs)
    csv_path = write_sweep_csv(recs, tmp_path / "s.csv")
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 1 + len(recs) and lines[0].startswith("h,n_r,n_phi")
    doc = json.loads(write_sweep_json(recs, fit, tmp_path / "s.json", {"tag": 1}).read_text())
    assert doc["tag"] == 1 and len(doc["records"]) == 4 and len(doc["bounds"]) == 4
    assert doc["fit"]["predicted_slope"] == pytest.approx(2 * ALPHA)
    svg = write_sweep_svg(recs, fit, tmp_path / "s.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<circle") == 4 and "</svg>" in svg


def test_failed_run_is_recorded(monkeypatch):
    import fvkcone.sweep as sw

    def boom(*a, **k):
        raise FloatingPointError("nan energy")

    monkeypatch.setattr(sw, "minimize", boom)
    rec = run_single(0.1, ResolutionPolicy(n_r=16, n_phi=8))
    assert rec.failed and not rec.ok and "nan" in rec.message and math.isnan(rec.e_min)
    with pytest.raises(ValueError):
        write_sweep_svg([rec], None, "/tmp/never.svg")
