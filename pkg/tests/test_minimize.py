import csv
import math

import numpy as np
import pytest

from fvkcone.analytic import competitor_energy_closed_form, competitor_fields
from fvkcone.diagnostics import bending_lb_certificate
from fvkcone.energy import FvkEnergy
from fvkcone.grid import build_grid, build_spec
from fvkcone.minimize import (MinimizationError, MinimizeOptions, certify,
                              convexity_certificate, gauss_newton_matrix, lbfgs, minimize,
                              write_iteration_log)

ALPHA = math.pi / 4
SPEC = build_spec(ALPHA, 0.2, beta=ALPHA / 4, h_star=0.25)


@pytest.fixture(scope="module")
def converged():
    g = build_grid(SPEC, 24, 12, "geometric")
    res = minimize(SPEC, g, options=MinimizeOptions(max_iters=500))
    assert res.converged
    return g, res


def test_quadratic_surrogate_three_iterations():
    rng = np.random.default_rng(0)
    a = rng.uniform(-0.5, 0.5, size=200)

    def fun(x):
        d = x - a
        return 0.5 * float(d @ d), d

    out = lbfgs(fun, np.zeros_like(a), MinimizeOptions(grad_tol=1e-12))
    assert out.converged and out.iterations <= 3
    assert np.max(np.abs(out.x - a)) < 1e-10


def test_quadratic_with_callable_h0():
    rng = np.random.default_rng(1)
    D = rng.uniform(1, 10, size=50)
    a = rng.normal(size=50)

    def fun(x):
        return 0.5 * float((x - a) @ (D * (x - a))), D * (x - a)

    out = lbfgs(fun, np.zeros(50), MinimizeOptions(grad_tol=1e-12), h0=lambda g: g / D)
    assert out.converged and out.iterations <= 3 and np.allclose(out.x, a, atol=1e-10)


@pytest.mark.parametrize("kw", [dict(max_iters=0), dict(grad_tol=0.0), dict(memory=0),
                                dict(c1=0.6), dict(backtrack=1.0), dict(penalty_weight=-1.0),
                                dict(preconditioner="newton"), dict(refresh=0)])
def test_options_validation(kw):
    with pytest.raises(ValueError):
        MinimizeOptions(**kw)


def test_nan_aborts_with_dump():
    def fun(x):
        if x[0] > 0.5:
            return math.nan, np.full_like(x, math.nan)
        return float(-x[0]), np.array([-1.0])

    with pytest.raises(MinimizationError) as err:
        lbfgs(fun, np.zeros(1), MinimizeOptions(max_iters=50))
    assert "x" in err.value.dump


def test_line_search_failure_keeps_best():
    # the reported gradient points the wrong way, so no step satisfies Armijo
    def fun(x):
        return float(x @ x), -2 * x

    out = lbfgs(fun, np.ones(3), MinimizeOptions(max_iters=10))
    assert out.failed and out.message == "line search failed"
    assert np.array_equal(out.x, np.ones(3)) and out.f == 3.0


def test_trace_monotone_and_log(converged, tmp_path):
    g, res = converged
    tr = np.array(res.trace)
    assert np.all(np.diff(tr) < 0)
    assert res.energy.total <= tr[0]
    assert len(res.log) == len(tr)
    path = write_iteration_log(res, tmp_path / "it.csv")
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["iter", "total", "membrane", "bending", "grad_norm", "step_length"]
    assert len(rows) == len(tr) and float(rows[-1]["total"]) == pytest.approx(tr[-1])


def test_restart_from_converged(converged):
    g, res = converged
    again = minimize(SPEC, g, init=res.fields, options=MinimizeOptions(max_iters=500))
    assert again.iterations <= 2
    assert abs(again.energy.total - res.energy.total) <= 1e-12


def test_symmetric_init_gives_symmetric_minimizer(converged):
    g, res = converged
    u, v = res.fields
    assert np.max(np.abs(v - v[:, ::-1])) <= 1e-8 * np.max(np.abs(v))
    assert np.max(np.abs(u[0] - u[0][:, ::-1])) <= 1e-8 * np.max(np.abs(u))
    assert np.max(np.abs(u[1] + u[1][:, ::-1])) <= 1e-8 * np.max(np.abs(u))


def test_determinism():
    g = build_grid(SPEC, 16, 12, "geometric")
    opts = MinimizeOptions(max_iters=40, penalty_weight=1e5 * SPEC.h**2)
    a = minimize(SPEC, g, options=opts)
    b = minimize(SPEC, g, options=opts)
    assert a.trace == b.trace and np.array_equal(a.dofs.x, b.dofs.x)


@pytest.mark.parametrize("pre", [None, "diagonal"])
def test_other_preconditioners_descend(pre):
    g = build_grid(SPEC, 16, 12, "geometric")
    res = minimize(SPEC, g, options=MinimizeOptions(max_iters=30, preconditioner=pre))
    assert res.energy.total < res.trace[0] and np.all(np.diff(res.trace) < 0)


def test_minimizer_between_certificate_and_competitor():
    spec = build_spec(ALPHA, 0.1, beta=ALPHA / 4, h_star=0.25)
    g = build_grid(spec, 64, 32, "geometric")
    res = minimize(spec, g, options=MinimizeOptions(max_iters=60,
                                                    penalty_weight=1e5 * spec.h**2))
    cf = competitor_energy_closed_form(spec.h, ALPHA)
    E = FvkEnergy(spec, g)
    u, v = competitor_fields(g, spec.h)
    assert res.energy.total < E.breakdown(E.layout.pack(u, v)).total
    assert res.energy.total < cf.total
    u, v = res.fields
    lb = spec.h**2 * bending_lb_certificate(v, g, spec, ghost_values=res.dofs.layout.v_ghost)
    assert lb <= res.energy.membrane + res.energy.bending


def test_gauss_newton_matrix_spd_and_exact_for_bending():
    g = build_grid(SPEC, 16, 12, "geometric")
    E = FvkEnergy(SPEC, g, penalty_weight=10.0)
    u, v = competitor_fields(g, SPEC.h)
    x = E.layout.pack(u, v)
    H = gauss_newton_matrix(E, x)
    assert abs(H - H.T).max() <= 1e-12 * abs(H).max()
    rng = np.random.default_rng(2)
    for _ in range(5):
        z = rng.normal(size=x.size)
        assert z @ (H @ z) >= 0
    # bending is quadratic in v, so its block is exact: isolate it by removing the h^2 term
    Eb = FvkEnergy(SPEC, g)
    Em = FvkEnergy(SPEC, g)
    Em.h = 0.0
    Hb = gauss_newton_matrix(Eb, x) - gauss_newton_matrix(Em, x)
    d = rng.normal(size=x.size)
    _, g1 = Eb.value_and_grad(x + d, ("bending",))
    _, g0 = Eb.value_and_grad(x, ("bending",))
    assert np.allclose(Hb @ d, g1 - g0, rtol=0, atol=1e-9 * np.abs(g1 - g0).max())


def test_certificates():
    g = build_grid(SPEC, 64, 32, "geometric")
    u, v = competitor_fields(g, SPEC.h)
    ghost = np.full(g.n_phi, g.r_ghost)
    c = convexity_certificate(v, g, ghost)
    assert c.min_eig >= -1e-6 and not c.flagged
    bad = convexity_certificate(-g.R**2, g)
    assert bad.flagged and bad.min_eig == pytest.approx(-2.0, rel=1e-6)
    assert bad.negative_measure == pytest.approx(float(g.cell_weights.sum()))


def test_certify_result(converged):
    g, res = converged
    c = certify(res)
    assert c.min_eig == res.min_eig
    assert set(c.to_dict()) == {"min_eig", "negative_measure", "tol", "flagged"}
