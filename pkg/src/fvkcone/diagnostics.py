"""Diagnostics for states ``(u, v)`` on the sector.

Every quantity is computed from nodal fields with the finite-difference
operators of :mod:`fvkcone.fields`:

* ``dual_pairing``: the two sides of the integration-by-parts identity
  ``int Phi det(Hess v) = -1/2 int Tr[(grad u + grad u^T + grad v (x) grad v) cof Hess Phi]``;
* ``w22_dual_norm``: the ``W^{-2,2}(2S)`` norm through a clamped biharmonic
  Galerkin solve;
* ``gradient_image_area``: area of ``grad v(mask)`` by the determinant integral
  and by rasterizing the image of every grid cell;
* ``trace_slope_curve``/``classify_angles``/``angle_deficit``: level sets of
  ``angle(grad v) - phi`` and their good/bad classification;
* ``slope_curve_lengths``/``bending_lb_certificate``: lengths of the curves
  ``phi -> grad v(s e_phi)`` and the Jensen lower bound on the bending energy;
* ``monge_ampere_check``: both terms of the dual-norm lower bound.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .analytic import TestFunction, cone_fields
from .fields import diff_ops, sym_det, sym_min_eig
from .grid import PolarGrid, SectorSpec

__all__ = [
    "DiagnosticsError",
    "DiagnosticsWarning",
    "PairingResult",
    "AreaEstimate",
    "SlopeTrace",
    "BadAngleReport",
    "SlopeCurveRecord",
    "MongeAmpereReport",
    "DiagnosticsReport",
    "extend_by_cone",
    "dual_pairing",
    "w22_dual_norm",
    "gradient_image_area",
    "trace_slope_curve",
    "classify_angles",
    "angle_deficit",
    "slope_curve_lengths",
    "bending_lb_certificate",
    "monge_ampere_check",
    "run_diagnostics",
    "write_polylines",
]


class DiagnosticsError(RuntimeError):
    pass


class DiagnosticsWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def _ghost(grid: PolarGrid, ghost_values):
    """Ghost tail for ``v``; without ghost values one-sided stencils are used."""
    if ghost_values is None or not grid.has_ghost:
        return None
    return np.broadcast_to(np.asarray(ghost_values, dtype=float), (grid.n_phi,))


def _derivs(v: np.ndarray, grid: PolarGrid, ghost_values=None, order: int = 2):
    g = _ghost(grid, ghost_values)
    ops = diff_ops(grid, g is not None)
    ve = np.concatenate((v.ravel(), g)) if g is not None else v.ravel()
    mats = (ops.dx, ops.dy) if order == 1 else (ops.dx, ops.dy, ops.dxx, ops.dxy, ops.dyy)
    return [(m @ ve).reshape(grid.shape) for m in mats]


def extend_by_cone(u: np.ndarray, v: np.ndarray, grid: PolarGrid, r_max: float = 2.0):
    """Extend ``(u, v)`` from the sector to ``{r < r_max}`` by the cone.

    Returns ``(grid2, u2, v2)`` where ``grid2 = grid.extended(r_max)`` shares the
    original nodes.
    """
    grid2 = grid.extended(r_max)
    uc, vc = cone_fields(grid2)
    n = grid.n_r
    u2, v2 = uc.copy(), vc.copy()
    u2[:, :n] = u
    v2[:n] = v
    return grid2, u2, v2


def _locate(grid: PolarGrid, r, phi):
    """Fractional (cell, weight) coordinates of points in index space."""
    r = np.asarray(r, dtype=float)
    phi = np.asarray(phi, dtype=float)
    i = np.clip(np.searchsorted(grid.r, r) - 1, 0, grid.n_r - 2)
    j = np.clip(np.searchsorted(grid.phi, phi) - 1, 0, grid.n_phi - 2)
    tr = (r - grid.r[i]) / (grid.r[i + 1] - grid.r[i])
    tp = (phi - grid.phi[j]) / (grid.phi[j + 1] - grid.phi[j])
    return i, j, tr, tp


def _interp(field_, grid: PolarGrid, r, phi):
    """Bilinear interpolation in ``(r, phi)`` of a nodal array (leading axes allowed)."""
    i, j, tr, tp = _locate(grid, r, phi)
    f = np.asarray(field_)
    return ((1 - tr) * (1 - tp) * f[..., i, j] + tr * (1 - tp) * f[..., i + 1, j]
            + (1 - tr) * tp * f[..., i, j + 1] + tr * tp * f[..., i + 1, j + 1])


# ---------------------------------------------------------------------------
# dual pairing


@dataclass(frozen=True)
class PairingResult:
    """Both sides of the pairing identity.

    ``route_a = -1/2 int Tr[M cof Hess Phi]`` with the membrane deficit ``M``;
    ``route_b = int Phi det Hess v``. They agree up to discretization error.
    """

    route_a: float
    route_b: float

    @property
    def gap(self) -> float:
        return abs(self.route_a - self.route_b)

    def to_dict(self) -> dict:
        return {"route_a": self.route_a, "route_b": self.route_b, "gap": self.gap}


def _check_support(phi: TestFunction, tol: float = 1e-12):
    vals, g = phi.values, phi.grid
    scale = max(float(np.max(np.abs(vals))), 1e-300)
    edges = np.concatenate((vals[-1, :], vals[:, 0], vals[:, -1]))
    if np.max(np.abs(edges)) > tol * scale or np.max(np.abs(vals[0])) > g.r_first * (1 + 1e-9):
        raise DiagnosticsError("test function is not compactly supported in 2S")


def dual_pairing(u: np.ndarray, v: np.ndarray, phi: TestFunction, grid: PolarGrid | None = None
                 ) -> PairingResult:
    """Evaluate both routes of the pairing on ``phi.grid`` (covering 2S).

    ``(u, v)`` are either given on ``phi.grid`` directly or on a base grid
    ``grid`` whose extension is ``phi.grid``; in the latter case they are
    extended by the cone.
    """
    g2 = phi.grid
    _check_support(phi)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if v.shape != g2.shape:
        if grid is None or v.shape != grid.shape:
            raise ValueError("fields match neither the test-function grid nor the base grid")
        g_ext, u, v = extend_by_cone(u, v, grid, g2.r[-1])
        if g_ext.shape != g2.shape or not np.array_equal(g_ext.r, g2.r):
            raise ValueError("test-function grid is not the extension of the base grid")
    ops = diff_ops(g2, False)
    u1, u2, vf = u[0].ravel(), u[1].ravel(), v.ravel()
    gx, gy = ops.dx @ vf, ops.dy @ vf
    m11 = 2 * (ops.dx @ u1) + gx * gx
    m12 = ops.dy @ u1 + ops.dx @ u2 + gx * gy
    m22 = 2 * (ops.dy @ u2) + gy * gy
    pxx, pxy, pyy = (c.ravel() for c in phi.hess)
    # Tr[M cof H] with cof H = [[H_yy, -H_xy], [-H_xy, H_xx]]
    tr = m11 * pyy - 2 * m12 * pxy + m22 * pxx
    w = g2.cell_weights.ravel()
    route_a = -0.5 * float(np.sum(w * tr))
    det = sym_det(ops.dxx @ vf, ops.dxy @ vf, ops.dyy @ vf)
    route_b = float(np.sum(w * phi.values.ravel() * det))
    return PairingResult(route_a=route_a, route_b=route_b)


# ---------------------------------------------------------------------------
# W^{-2,2} norm


def _clamped_interior(grid: PolarGrid, layers: int = 2) -> np.ndarray:
    m = np.ones(grid.shape, dtype=bool)
    m[:layers, :] = False
    m[-layers:, :] = False
    m[:, :layers] = False
    m[:, -layers:] = False
    return m


def _biharmonic_system(grid: PolarGrid):
    cached = getattr(grid, "_bih_cache", None)
    if cached is not None:
        return cached
    ops = diff_ops(grid, False)
    W = sp.diags(grid.cell_weights.ravel())
    A = ops.dxx.T @ W @ ops.dxx + 2 * ops.dxy.T @ W @ ops.dxy + ops.dyy.T @ W @ ops.dyy
    inner = np.flatnonzero(_clamped_interior(grid).ravel())
    A = A.tocsr()[inner][:, inner].tocsr()
    object.__setattr__(grid, "_bih_cache", (A, inner))
    return A, inner


def w22_dual_norm(mu: np.ndarray, grid: PolarGrid, rtol: float = 1e-10,
                  return_representer: bool = False):
    """Discrete ``||mu||_{W^{-2,2}}`` on ``grid`` (normally a grid over 2S).

    Solves ``sum_ij D_ij^T W D_ij Psi = W mu`` over nodes away from the
    boundary (two clamped layers on every side) by Jacobi-preconditioned CG
    and returns ``sqrt(Psi . W mu)``. With ``return_representer`` the nodal
    ``Psi`` is returned as well.
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != grid.shape:
        raise ValueError(f"expected shape {grid.shape}, got {mu.shape}")
    if not np.all(np.isfinite(mu)):
        raise ValueError("mu contains NaN or inf")
    A, inner = _biharmonic_system(grid)
    b = (grid.cell_weights * mu).ravel()[inner]
    psi = np.zeros(grid.size)
    if not np.any(b):
        return (0.0, psi.reshape(grid.shape)) if return_representer else 0.0
    # solve in units of |b| so the relative tolerance is scale free
    scale = float(np.max(np.abs(b)))
    bs = b / scale
    d = A.diagonal()
    M = sp.diags(1.0 / d)
    maxiter = 10 * len(inner)
    x, info = spla.cg(A, bs, rtol=rtol, atol=0.0, maxiter=maxiter, M=M)
    res = float(np.linalg.norm(A @ x - bs) / np.linalg.norm(bs))
    if info != 0:
        raise DiagnosticsError(f"CG did not converge in {maxiter} iterations "
                               f"(relative residual {res:.3e})")
    x = x * scale
    psi[inner] = x
    value = math.sqrt(max(float(x @ b), 0.0))
    return (value, psi.reshape(grid.shape)) if return_representer else value


def discrete_hessian_norm(values: np.ndarray, grid: PolarGrid) -> float:
    """``||Hess f||_{L2}`` with the same operator the dual norm uses (no ghost)."""
    ops = diff_ops(grid, False)
    f = np.asarray(values, dtype=float).ravel()
    a, b, c = ops.dxx @ f, ops.dxy @ f, ops.dyy @ f
    return math.sqrt(float(np.sum(grid.cell_weights.ravel() * (a * a + 2 * b * b + c * c))))


# ---------------------------------------------------------------------------
# gradient image area


@dataclass(frozen=True)
class AreaEstimate:
    det_estimate: float
    raster_estimate: float
    convex: bool
    min_eig: float

    @property
    def relative_gap(self) -> float:
        top = max(abs(self.det_estimate), abs(self.raster_estimate))
        return abs(self.det_estimate - self.raster_estimate) / top if top > 0 else 0.0

    def to_dict(self) -> dict:
        return {"det_estimate": self.det_estimate, "raster_estimate": self.raster_estimate,
                "relative_gap": self.relative_gap, "convex": self.convex,
                "min_eig": self.min_eig}


def _raster_triangles(P0, P1, P2, n_pix: int) -> np.ndarray:
    """Union of triangles on an ``n_pix^2`` pixel grid over ``[-1, 1]^2``.

    A pixel is covered when its centre lies in a triangle (closed, with a small
    tolerance). Triangles are processed in batches grouped by bounding-box size.
    """
    covered = np.zeros((n_pix, n_pix), dtype=bool)
    scale = n_pix / 2.0

    def to_pix(p):
        return (p + 1.0) * scale - 0.5  # pixel-centre coordinates

    A, B, C = to_pix(P0), to_pix(P1), to_pix(P2)
    lo = np.floor(np.minimum(np.minimum(A, B), C)).astype(np.int64)
    hi = np.ceil(np.maximum(np.maximum(A, B), C)).astype(np.int64)
    lo = np.clip(lo, 0, n_pix - 1)
    hi = np.clip(hi, 0, n_pix - 1)
    ok = np.all(hi >= lo, axis=1)
    size = np.max(hi - lo + 1, axis=1)
    ok &= size >= 1
    den = (B[:, 1] - C[:, 1]) * (A[:, 0] - C[:, 0]) + (C[:, 0] - B[:, 0]) * (A[:, 1] - C[:, 1])
    ok &= np.abs(den) > 1e-14
    if not ok.any():
        return covered
    classes = np.zeros_like(size)
    classes[ok] = np.ceil(np.log2(np.maximum(size[ok], 1))).astype(np.int64)
    for cls in np.unique(classes[ok]):
        idx = np.flatnonzero(ok & (classes == cls))
        k = int(2**cls)
        # limit the batch so that the temporary arrays stay small
        step = max(1, 2_000_000 // (k * k))
        off = np.arange(k)
        for s in range(0, len(idx), step):
            sel = idx[s:s + step]
            px = lo[sel, 0][:, None, None] + off[None, :, None]
            py = lo[sel, 1][:, None, None] + off[None, None, :]
            a, b, c, dd = A[sel], B[sel], C[sel], den[sel]
            l1 = ((b[:, 1] - c[:, 1])[:, None, None] * (px - c[:, 0][:, None, None])
                  + (c[:, 0] - b[:, 0])[:, None, None] * (py - c[:, 1][:, None, None]))
            l1 = l1 / dd[:, None, None]
            l2 = ((c[:, 1] - a[:, 1])[:, None, None] * (px - c[:, 0][:, None, None])
                  + (a[:, 0] - c[:, 0])[:, None, None] * (py - c[:, 1][:, None, None]))
            l2 = l2 / dd[:, None, None]
            l3 = 1.0 - l1 - l2
            eps = -1e-9
            inside = (l1 >= eps) & (l2 >= eps) & (l3 >= eps)
            inside &= (px <= hi[sel, 0][:, None, None]) & (py <= hi[sel, 1][:, None, None])
            t, ix, iy = np.nonzero(inside)
            covered[px[t, ix, 0], py[t, 0, iy]] = True
    return covered


def gradient_image_area(v: np.ndarray, grid: PolarGrid, mask: np.ndarray | None = None,
                        ghost_values=None, n_pix: int = 1024) -> AreaEstimate:
    """Area of ``grad v(mask)`` by ``int_mask det Hess v`` and by rasterization.

    The raster estimate covers every grid cell whose four corners are in
    ``mask``; each cell's image is the quadrilateral of its corner gradients
    (split into two triangles). Pixels tile ``[-1, 1]^2``. Both estimates are
    computed for non-convex ``v`` too; ``convex`` records whether
    ``min lambda_min(Hess v) >= -1e-6 max|Hess v|`` on the mask.
    """
    v = np.asarray(v, dtype=float)
    m = np.ones(grid.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    gx, gy, a, b, c = _derivs(v, grid, ghost_values)
    det = sym_det(a, b, c)
    lam = sym_min_eig(a, b, c)
    frob = np.sqrt(a * a + 2 * b * b + c * c)
    if m.any():
        min_eig = float(lam[m].min())
        convex = bool(min_eig >= -1e-6 * float(frob[m].max()))
    else:
        min_eig, convex = 0.0, True
    det_est = float(np.sum((det * grid.cell_weights)[m]))
    cell = m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]
    G = np.stack([gx, gy], axis=-1)
    c00, c10 = G[:-1, :-1][cell], G[1:, :-1][cell]
    c11, c01 = G[1:, 1:][cell], G[:-1, 1:][cell]
    P0 = np.concatenate((c00, c00))
    P1 = np.concatenate((c10, c11))
    P2 = np.concatenate((c11, c01))
    covered = _raster_triangles(P0, P1, P2, n_pix)
    raster = float(covered.sum()) * (2.0 / n_pix) ** 2
    if not convex:
        warnings.warn("v is not convex on the mask; image-area estimates may disagree",
                      DiagnosticsWarning, stacklevel=2)
    return AreaEstimate(det_estimate=det_est, raster_estimate=raster, convex=convex,
                        min_eig=min_eig)


# ---------------------------------------------------------------------------
# constant-slope curves


@dataclass
class SlopeTrace:
    """Traced level set of ``angle(grad v) = phi`` starting on the arc."""

    phi: float
    points: np.ndarray          # (k, 2) Cartesian vertices
    endpoint: np.ndarray        # y_phi
    exit: str                   # "radial", "lateral", "grid" or "lost"
    grad_norm_end: float        # |grad v(y_phi)|
    max_angle_error: float      # max over vertices of |angle(grad v) - phi|
    cut_crossings: int = 0

    @property
    def ok(self) -> bool:
        return self.exit in ("radial", "lateral")


def _angle_field(gx, gy, phi):
    g = np.arctan2(gy, gx) - phi
    return g


def _edge_root(ga, gb):
    """Fraction along an edge where the linear interpolant vanishes, or None."""
    if abs(ga - gb) > math.pi:  # branch cut of the angle
        return None
    if ga == 0.0:
        return 0.0
    if (ga < 0) == (gb < 0) and gb != 0.0:
        return None
    return ga / (ga - gb)


def trace_slope_curve(v: np.ndarray, grid: PolarGrid, phi: float, spec: SectorSpec,
                      ghost_values=None, derivs=None, max_steps: int | None = None
                      ) -> SlopeTrace:
    """Follow the zero set of ``g = angle(grad v) - phi`` inward from the arc.

    The contour starts at the zero of ``g`` on the arc nearest to ``e_phi`` and
    is followed cell by cell (bilinear marching squares, saddle cells resolved
    by the sign of ``g`` at the cell centre) until it leaves
    ``S_{h,phi} = {h* < r < 1, |arg x - phi| < beta}``. The exit point is
    ``y_phi``; the segment that leaves is clipped at the boundary.
    """
    if derivs is None:
        derivs = _derivs(v, grid, ghost_values, order=1)
    gx, gy = derivs[0], derivs[1]
    g = _angle_field(gx, gy, phi)
    X, Y = grid.X, grid.Y
    n_r, n_phi = grid.shape
    beta, h_star = spec.beta, spec.h_star
    max_steps = max_steps or 4 * grid.size

    def point_on_edge(e, t):
        (i0, j0), (i1, j1) = e
        return np.array([X[i0, j0] + t * (X[i1, j1] - X[i0, j0]),
                         Y[i0, j0] + t * (Y[i1, j1] - Y[i0, j0])])

    def inside(p):
        r = math.hypot(p[0], p[1])
        return r > h_star and abs(math.atan2(p[1], p[0]) - phi) < beta and r <= 1.0 + 1e-12

    def clip(p_in, p_out):
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if inside(p_in + mid * (p_out - p_in)):
                lo = mid
            else:
                hi = mid
        q = p_in + lo * (p_out - p_in)
        r = math.hypot(q[0], q[1])
        kind = "radial" if abs(r - h_star) <= abs(abs(math.atan2(q[1], q[0]) - phi) - beta) * r \
            else "lateral"
        return q, kind

    # start: zero of g on the last ring nearest to phi
    last = n_r - 1
    best, start = None, None
    cuts = 0
    for j in range(n_phi - 1):
        t = _edge_root(g[last, j], g[last, j + 1])
        if t is None:
            if (g[last, j] < 0) != (g[last, j + 1] < 0):
                cuts += 1
            continue
        ang = grid.phi[j] + t * (grid.phi[j + 1] - grid.phi[j])
        if best is None or abs(ang - phi) < best:
            best, start = abs(ang - phi), (j, t)
    if start is None:
        e = np.array([math.cos(phi), math.sin(phi)])
        return SlopeTrace(phi, e[None, :], e, "lost", float("nan"), float("nan"), cuts)
    j, t = start
    p = point_on_edge(((last, j), (last, j + 1)), t)
    pts = [p]
    # the cell below the arc edge (rings last-1..last, angles j..j+1); entered through its top edge
    ci, cj = last - 1, j
    entry = "top"
    visited = set()
    exit_kind = "grid"
    for _ in range(max_steps):
        if (ci, cj, entry) in visited:
            exit_kind = "lost"
            break
        visited.add((ci, cj, entry))
        corners = {"bottom": ((ci, cj), (ci, cj + 1)), "right": ((ci, cj + 1), (ci + 1, cj + 1)),
                   "top": ((ci + 1, cj), (ci + 1, cj + 1)), "left": ((ci, cj), (ci + 1, cj))}
        roots = {}
        for name, ((a0, b0), (a1, b1)) in corners.items():
            t = _edge_root(g[a0, b0], g[a1, b1])
            if t is None and (g[a0, b0] < 0) != (g[a1, b1] < 0):
                cuts += 1
            if t is not None:
                roots[name] = t
        candidates = [k for k in roots if k != entry]
        if not candidates:
            exit_kind = "lost"
            break
        if len(candidates) == 1:
            nxt = candidates[0]
        else:
            # saddle: the contour cuts off the entry corner whose sign differs
            # from the bilinear value at the cell centre
            gc = 0.25 * (g[ci, cj] + g[ci + 1, cj] + g[ci, cj + 1] + g[ci + 1, cj + 1])
            p0, p1 = corners[entry]
            cut = p0 if (g[p0] < 0) != (gc < 0) else p1
            nxt = next(k for k in candidates if cut in corners[k])
        q = point_on_edge(corners[nxt], roots[nxt])
        if not inside(q):
            y, exit_kind = clip(pts[-1], q)
            pts.append(y)
            break
        pts.append(q)
        step = {"bottom": (-1, 0, "top"), "top": (1, 0, "bottom"),
                "left": (0, -1, "right"), "right": (0, 1, "left")}[nxt]
        ci, cj, entry = ci + step[0], cj + step[1], step[2]
        if not (0 <= ci < n_r - 1 and 0 <= cj < n_phi - 1):
            exit_kind = "grid"
            break
    else:
        exit_kind = "lost"
    pts = np.array(pts)
    y = pts[-1]
    ry, py = math.hypot(*y), math.atan2(y[1], y[0])
    gnorm = float(np.hypot(_interp(gx, grid, ry, py), _interp(gy, grid, ry, py)))
    vx = _interp(gx, grid, np.hypot(pts[:, 0], pts[:, 1]), np.arctan2(pts[:, 1], pts[:, 0]))
    vy = _interp(gy, grid, np.hypot(pts[:, 0], pts[:, 1]), np.arctan2(pts[:, 1], pts[:, 0]))
    err = np.abs(np.angle(np.exp(1j * (np.arctan2(vy, vx) - phi))))
    return SlopeTrace(phi=float(phi), points=pts, endpoint=y, exit=exit_kind,
                      grad_norm_end=gnorm, max_angle_error=float(err.max()), cut_crossings=cuts)


@dataclass
class BadAngleReport:
    """Good/bad classification of sampled angles in ``(-alpha+2beta, alpha-2beta)``."""

    angles: np.ndarray
    endpoints: np.ndarray
    grad_norms: np.ndarray
    good: np.ndarray
    traced: np.ndarray
    radius_tol: float
    traces: list = field(default_factory=list, repr=False)

    @property
    def n_lost(self) -> int:
        return int((~self.traced).sum())

    @property
    def bad_fraction(self) -> float:
        n = int(self.traced.sum())
        if n == 0:
            return float("nan")
        return float((~self.good & self.traced).sum()) / n

    def to_dict(self) -> dict:
        return {"n_samples": int(self.angles.size), "n_lost": self.n_lost,
                "bad_fraction": self.bad_fraction, "radius_tol": self.radius_tol,
                "angles": self.angles.tolist(),
                "endpoint_radius": np.hypot(*self.endpoints.T).tolist(),
                "grad_norm": self.grad_norms.tolist(), "good": self.good.tolist()}


def classify_angles(v: np.ndarray, grid: PolarGrid, spec: SectorSpec, n_samples: int = 64,
                    ghost_values=None) -> BadAngleReport:
    """Trace ``n_samples`` uniformly spaced angles and classify them.

    An angle is good when ``|y_phi| <= h* + 2 dr`` (``dr`` the radial spacing
    at ``h*``) and ``|grad v(y_phi)| >= 1 - beta``. Angles whose trace is lost
    are excluded from the fraction and counted in ``n_lost``.
    """
    if n_samples < 64:
        raise ValueError("n_samples must be >= 64")
    lo, hi = -spec.alpha + 2 * spec.beta, spec.alpha - 2 * spec.beta
    if not lo < hi:
        raise ValueError("angular range (-alpha+2beta, alpha-2beta) is empty")
    angles = lo + (np.arange(n_samples) + 0.5) * (hi - lo) / n_samples
    derivs = _derivs(np.asarray(v, dtype=float), grid, ghost_values, order=1)
    k = int(np.clip(np.searchsorted(grid.r, spec.h_star), 1, grid.n_r - 1))
    radius_tol = 2.0 * (grid.r[k] - grid.r[k - 1])
    ends, norms, good, traced, traces = [], [], [], [], []
    for phi in angles:
        tr = trace_slope_curve(v, grid, phi, spec, derivs=derivs)
        traces.append(tr)
        ends.append(tr.endpoint)
        norms.append(tr.grad_norm_end)
        traced.append(tr.ok)
        ry = float(np.hypot(*tr.endpoint))
        good.append(tr.ok and ry <= spec.h_star + radius_tol
                    and tr.grad_norm_end >= 1.0 - spec.beta)
    return BadAngleReport(angles=angles, endpoints=np.array(ends), grad_norms=np.array(norms),
                          good=np.array(good), traced=np.array(traced), radius_tol=radius_tol,
                          traces=traces)


def angle_deficit(v: np.ndarray, grid: PolarGrid, trace: SlopeTrace) -> dict:
    """``v(y) - (y . e_phi) |grad v(y)|`` at the endpoint of ``trace``.

    For a lateral exit the ratio ``deficit / (|y| (phi - arg y)^2)`` is
    reported as ``constant`` (``nan`` otherwise).
    """
    y = trace.endpoint
    ry, py = float(np.hypot(*y)), float(math.atan2(y[1], y[0]))
    vy = float(_interp(np.asarray(v, dtype=float), grid, ry, py))
    e = np.array([math.cos(trace.phi), math.sin(trace.phi)])
    deficit = vy - float(y @ e) * trace.grad_norm_end
    const = float("nan")
    if trace.exit == "lateral":
        denom = ry * (trace.phi - py) ** 2
        const = deficit / denom if denom > 0 else float("nan")
    return {"phi": trace.phi, "deficit": deficit, "exit": trace.exit, "constant": const}


# ---------------------------------------------------------------------------
# slope-curve lengths and the Jensen certificate


@dataclass
class SlopeCurveRecord:
    radius: float
    polyline: np.ndarray   # (k, 2) values of grad v(s e_phi)
    length: float

    def to_dict(self) -> dict:
        return {"radius": self.radius, "length": self.length}


def _angular_window(grid: PolarGrid, lo: float, hi: float):
    """Nodes and trapezoid weights for integrating over ``(lo, hi)`` with linear ends."""
    phi = grid.phi
    inner = np.flatnonzero((phi > lo) & (phi < hi))
    pts = np.concatenate(([lo], phi[inner], [hi]))
    w = np.zeros(pts.size)
    d = np.diff(pts)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return pts, w


def slope_curve_lengths(v: np.ndarray, grid: PolarGrid, spec: SectorSpec, radii=None,
                        ghost_values=None) -> list:
    """Lengths ``L(s) = int |d/dphi grad v(s e_phi)| dphi`` over ``|phi| < alpha - beta``.

    ``d/dphi grad v(s e_phi) = s Hess v e_phi^perp`` is sampled at the grid's
    angular nodes (plus the interval ends, by linear interpolation in angle)
    and linearly interpolated in ``r``; the integral is a trapezoid sum.
    ``radii`` default to ``h*``, the rings strictly between ``h*`` and 1, and 1.
    """
    if radii is None:
        r = grid.r
        radii = np.concatenate(([spec.h_star], r[(r > spec.h_star) & (r < 1.0)], [1.0]))
    radii = np.asarray(radii, dtype=float)
    if np.any(radii < spec.h_star - 1e-12) or np.any(radii > 1.0 + 1e-12):
        raise ValueError("radii must lie in [h*, 1]")
    gx, gy, a, b, c = _derivs(np.asarray(v, dtype=float), grid, ghost_values)
    P = grid.PHI
    ex, ey = -np.sin(P), np.cos(P)
    R = grid.R
    tx = R * (a * ex + b * ey)
    ty = R * (b * ex + c * ey)
    pts, w = _angular_window(grid, -spec.alpha + spec.beta, spec.alpha - spec.beta)
    out = []
    for s in radii:
        ss = np.full(pts.shape, s)
        dx = _interp(tx, grid, ss, pts)
        dy = _interp(ty, grid, ss, pts)
        length = float(np.sum(w * np.hypot(dx, dy)))
        poly = np.stack([_interp(gx, grid, ss, pts), _interp(gy, grid, ss, pts)], axis=1)
        out.append(SlopeCurveRecord(radius=float(s), polyline=poly, length=length))
    return out


def bending_lb_certificate(v: np.ndarray, grid: PolarGrid, spec: SectorSpec, ghost_values=None,
                           records: list | None = None) -> float:
    """``int_{h*}^1 L(s)^2 / (2 alpha s) ds`` by the trapezoid rule over the radii."""
    if records is None:
        records = slope_curve_lengths(v, grid, spec, ghost_values=ghost_values)
    s = np.array([rec.radius for rec in records])
    L = np.array([rec.length for rec in records])
    f = L**2 / (2 * spec.alpha * s)
    return float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(s)))


# ---------------------------------------------------------------------------
# Monge-Ampere margin


@dataclass(frozen=True)
class MongeAmpereReport:
    eps: float
    dual_norm: float
    hessian_sq: float
    lhs: float
    leading: float
    margin: float
    implied_constant: float

    def to_dict(self) -> dict:
        return asdict(self)


def monge_ampere_check(v: np.ndarray, grid: PolarGrid, eps: float, ghost_values=None,
                       r_max: float = 2.0) -> MongeAmpereReport:
    """``LHS = eps^-2 ||det Hess v||^2_{W^-2,2(2S)} + ||Hess v||^2_{L2(S)}``.

    ``v`` lives on the sector grid and is extended by the cone to
    ``{r < r_max}``. Reported: the leading term ``2 alpha log(1/eps)``, the
    margin ``LHS - leading`` and ``C = (leading - LHS) / log log(1/eps)``
    (``nan`` when ``log log(1/eps) <= 0``).
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    v = np.asarray(v, dtype=float)
    _, _, a, b, c = _derivs(v, grid, ghost_values)
    hess_sq = float(np.sum(grid.cell_weights * (a * a + 2 * b * b + c * c)))
    uc = np.zeros((2,) + grid.shape)
    grid2, _, v2 = extend_by_cone(uc, v, grid, r_max)
    ops = diff_ops(grid2, False)
    vf = v2.ravel()
    mu = sym_det(ops.dxx @ vf, ops.dxy @ vf, ops.dyy @ vf).reshape(grid2.shape)
    dual = w22_dual_norm(mu, grid2)
    lhs = dual**2 / eps**2 + hess_sq
    leading = 2 * grid.alpha * math.log(1 / eps)
    ll = math.log(math.log(1 / eps)) if eps < math.exp(-1) else 0.0
    implied = (leading - lhs) / ll if ll > 0 else float("nan")
    return MongeAmpereReport(eps=eps, dual_norm=dual, hessian_sq=hess_sq, lhs=lhs,
                             leading=leading, margin=lhs - leading, implied_constant=implied)


# ---------------------------------------------------------------------------
# aggregate report


@dataclass
class DiagnosticsReport:
    pairing: PairingResult | None
    w22_norm: float | None
    grad_image_area: AreaEstimate
    bad_angles: BadAngleReport
    slope_lengths: list
    certificate: float
    bending_sq: float
    ma_check: MongeAmpereReport | None
    deficits: list
    config_hash: str | None = None

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "pairing": None if self.pairing is None else self.pairing.to_dict(),
            "w22_norm": self.w22_norm,
            "grad_image_area": self.grad_image_area.to_dict(),
            "bad_angles": self.bad_angles.to_dict(),
            "slope_lengths": [r.to_dict() for r in self.slope_lengths],
            "bending_lb_certificate": self.certificate,
            "hessian_sq_S1": self.bending_sq,
            "ma_check": None if self.ma_check is None else self.ma_check.to_dict(),
            "deficits": self.deficits,
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True))
        return path


def run_diagnostics(u: np.ndarray, v: np.ndarray, grid: PolarGrid, spec: SectorSpec,
                    phi: TestFunction | None = None, eps: float | None = None,
                    n_samples: int = 64, ghost_values=None, n_pix: int = 1024,
                    config_hash: str | None = None) -> DiagnosticsReport:
    """All diagnostics for one state on the sector grid.

    ``phi`` (on ``grid.extended()``) enables the pairing and the dual norm of
    ``det Hess v``; ``eps`` enables the Monge-Ampere check.
    """
    v = np.asarray(v, dtype=float)
    pairing = w22 = None
    if phi is not None:
        pairing = dual_pairing(u, v, phi, grid)
        g2, _, v2 = extend_by_cone(np.asarray(u), v, grid, phi.grid.r[-1])
        ops = diff_ops(g2, False)
        vf = v2.ravel()
        mu = sym_det(ops.dxx @ vf, ops.dxy @ vf, ops.dyy @ vf).reshape(g2.shape)
        w22 = w22_dual_norm(mu, g2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DiagnosticsWarning)
        area = gradient_image_area(v, grid, grid.region_mask("S2", spec), ghost_values, n_pix)
    bad = classify_angles(v, grid, spec, n_samples, ghost_values)
    deficits = [angle_deficit(v, grid, t) for t in bad.traces if t.ok]
    records = slope_curve_lengths(v, grid, spec, ghost_values=ghost_values)
    cert = bending_lb_certificate(v, grid, spec, records=records)
    _, _, a, b, c = _derivs(v, grid, ghost_values)
    s1 = grid.region_mask("S1", spec)
    bend = float(np.sum((grid.cell_weights * (a * a + 2 * b * b + c * c))[s1]))
    ma = monge_ampere_check(v, grid, eps, ghost_values) if eps is not None else None
    return DiagnosticsReport(pairing=pairing, w22_norm=w22, grad_image_area=area,
                             bad_angles=bad, slope_lengths=records, certificate=cert,
                             bending_sq=bend, ma_check=ma, deficits=deficits,
                             config_hash=config_hash)


def write_polylines(report: BadAngleReport, path) -> Path:
    """CSV with one row per traced vertex: ``phi, vertex, x, y``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["phi", "vertex", "x", "y"])
        for tr in report.traces:
            for k, (x, y) in enumerate(tr.points):
                wr.writerow([repr(tr.phi), k, repr(float(x)), repr(float(y))])
    return path
