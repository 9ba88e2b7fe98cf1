import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvkcone.grid import (GridError, SpecError, build_grid, build_spec, grid_from_header)

ALPHA = math.pi / 4


def test_spec_defaults_small_h():
    h = math.exp(-10)
    spec = build_spec(ALPHA, h)
    assert spec.beta == pytest.approx(0.1, rel=1e-12)
    assert spec.h_star == 0.25
    assert spec.overridden == ()


def test_spec_rejects_default_scales_at_h_005():
    with pytest.raises(SpecError, match="explicitly"):
        build_spec(ALPHA, 0.05)
    # raw default h* is about 36
    assert 0.05 * math.log(20) ** 6 == pytest.approx(36.0, rel=0.02)


def test_spec_rejects_h_05():
    with pytest.raises(SpecError):
        build_spec(ALPHA, 0.5)
    assert 1 / math.log(2) > ALPHA / 2


def test_spec_overrides_accepted():
    spec = build_spec(ALPHA, 0.05, beta=ALPHA / 4, h_star=0.25)
    assert spec.overridden == ("beta", "h_star")
    assert spec.beta == ALPHA / 4


@pytest.mark.parametrize("kw", [dict(beta=ALPHA / 2), dict(beta=0.0), dict(h_star=0.01),
                                dict(h_star=1.0)])
def test_spec_invalid_overrides(kw):
    args = dict(beta=0.1, h_star=0.25)
    args.update(kw)
    with pytest.raises(SpecError):
        build_spec(ALPHA, 0.05, **args)


@pytest.mark.parametrize("alpha,h", [(0.0, 0.1), (math.pi / 2, 0.1), (ALPHA, 0.0), (ALPHA, 1.0)])
def test_spec_invalid_domain(alpha, h):
    with pytest.raises(SpecError):
        build_spec(alpha, h, beta=0.1, h_star=0.25)


def spec01():
    return build_spec(ALPHA, 0.1, beta=ALPHA / 4, h_star=0.25)


def test_weights_sum_uniform_example():
    g = build_grid(spec01(), 64, 32, "uniform", r_first=0.01)
    assert g.cell_weights.sum() == pytest.approx(ALPHA * (1 - 1e-4), rel=1e-12)
    assert g.r[-1] == 1.0 and g.r[0] == 0.01


def test_geometric_ratio_spacing_increases():
    g = build_grid(spec01(), 64, 32, "geometric", ratio=1.05)
    d = np.diff(g.r)
    assert np.all(np.diff(d) > 0)
    assert np.allclose(d[1:] / d[:-1], 1.05)


def test_log_uniform_grading():
    g = build_grid(spec01(), 64, 32, "geometric")
    q = g.r[1:] / g.r[:-1]
    assert np.allclose(q, q[0])


def test_masks_nested():
    spec = spec01()
    g = build_grid(spec, 64, 32, "uniform")
    s, s1, s2 = (g.region_mask(k, spec) for k in ("S", "S1", "S2"))
    assert np.all(s2 <= s1) and np.all(s1 <= s)
    assert s2.sum() < s1.sum()


def test_quadrature_r2():
    spec = spec01()
    errs = []
    for n in (32, 64, 128):
        g = build_grid(spec, n, 16, "uniform")
        exact = ALPHA * (1 - g.r_first**4) / 2
        errs.append(abs(float(np.sum(g.R**2 * g.cell_weights)) - exact))
    assert errs[1] < errs[0] / 3 and errs[2] < errs[1] / 3


def test_mask_measure_converges():
    spec = spec01()
    exact = (ALPHA - spec.beta) * (1 - spec.h**2)
    errs = []
    for n in (32, 64, 128, 256):
        g = build_grid(spec, n, n, "uniform")
        errs.append(abs(float(g.cell_weights[g.region_mask("S1", spec)].sum()) - exact))
    assert errs[-1] < 0.05 * exact and errs[-1] < errs[0]


def test_grid_rejections():
    spec = spec01()
    with pytest.raises(GridError):
        build_grid(spec, 7, 32)
    with pytest.raises(GridError):
        build_grid(spec, 32, 32, r_first=spec.h / 2)


def test_header_roundtrip_bit_exact():
    g = build_grid(spec01(), 40, 20, "geometric")
    g2 = grid_from_header(g.header())
    assert np.array_equal(g.r, g2.r) and np.array_equal(g.phi, g2.phi)
    assert g.r_ghost == g2.r_ghost
    e = g.extended()
    e2 = grid_from_header(e.header())
    assert np.array_equal(e.r, e2.r)


def test_loglinear_grading():
    spec = build_spec(ALPHA, 0.02, beta=0.1, h_star=0.25)
    c = 0.1
    g = build_grid(spec, 96, 48, "loglinear", ratio=c)
    r = g.r
    # nodes are equally spaced in t K = log(r / r_first) + (r - r_first) / c
    t = np.log(r / r[0]) + (r - r[0]) / c
    assert np.allclose(np.diff(t), t[-1] / 95, rtol=1e-9)
    dr = np.diff(r)
    assert dr[0] / r[0] == pytest.approx(dr[1] / r[1], rel=0.01)
    assert dr[-1] == pytest.approx(dr[-2], rel=0.01)
    assert np.sum(r < 0.02) - 1 >= 8
    g2 = grid_from_header(g.extended().header())
    assert np.array_equal(g2.r, g.extended().r)
    with pytest.raises(GridError):
        build_grid(spec, 32, 16, "loglinear", ratio=-1.0)


def test_extended_grid_shares_nodes():
    g = build_grid(spec01(), 40, 20, "uniform")
    e = g.extended(2.0)
    assert np.array_equal(e.r[: g.n_r], g.r) and e.r[-1] == 2.0
    assert not e.has_ghost


@settings(max_examples=25, deadline=None)
@given(st.integers(8, 60), st.integers(8, 60), st.floats(0.05, 0.5),
       st.sampled_from(["uniform", "geometric", "loglinear"]))
def test_weight_sum_property(n_r, n_phi, h, grading):
    spec = build_spec(ALPHA, h, beta=0.1, h_star=max(h, 0.25))
    g = build_grid(spec, n_r, n_phi, grading)
    assert g.cell_weights.sum() == pytest.approx(ALPHA * (1 - g.r_first**2), rel=1e-12)
    assert np.all(np.diff(g.r) > 0)
    assert np.allclose(g.phi, -g.phi[::-1], atol=0, rtol=0)
