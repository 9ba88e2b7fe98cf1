"""Discrete Föppl–von-Kármán energy with clamped conical boundary data.

Unknowns are the nodal values of ``(u1, u2, v)``. On the arc ``r = 1`` all
three are pinned to the cone; the out-of-plane slope is clamped through a
ghost ring of ``v`` fixed at cone values just outside the arc. Lateral edges
and the truncated tip are free.

The energy is

    sum_nodes w * ( |grad u + grad u^T + grad v (x) grad v|^2 + h^2 |Hess v|^2 )
      + penalty_weight * sum_nodes w * max(0, -lambda_min(Hess v))^2

with Frobenius norms and the finite-difference operators of
:mod:`fvkcone.fields`. Its gradient is the exact adjoint of that
discretization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analytic import cone_fields
from .fields import diff_ops
from .grid import PolarGrid, SectorSpec

__all__ = [
    "EnergyBreakdown",
    "DofLayout",
    "DofVector",
    "FvkEnergy",
    "apply_boundary_conditions",
    "energy",
    "energy_gradient",
    "convexity_penalty",
]


@dataclass(frozen=True)
class EnergyBreakdown:
    membrane: float
    bending: float
    penalty: float
    h: float
    total: float = field(default=None)

    def __post_init__(self):
        for name in ("membrane", "bending", "penalty"):
            val = getattr(self, name)
            if not np.isfinite(val):
                raise ValueError(f"{name} energy is not finite")
            if val < 0:
                raise ValueError(f"{name} energy is negative")
        object.__setattr__(self, "total", self.membrane + self.bending + self.penalty)

    def to_dict(self) -> dict:
        return {"membrane": self.membrane, "bending": self.bending,
                "penalty": self.penalty, "total": self.total, "h": self.h}


class DofLayout:
    """Index map between the flat unknown vector and nodal fields.

    The flat vector stacks the free values of ``u1``, ``u2`` and ``v`` (in that
    order, r-major within each). Nodes on the arc are constrained and hold
    cone values; ``v_ghost`` holds the fixed ghost ring.
    """

    def __init__(self, grid: PolarGrid):
        if not grid.has_ghost:
            raise ValueError("grid has no ghost ring; build it with ghost=True")
        if abs(grid.r_last - 1.0) > 1e-12:
            raise ValueError("the last ring must be the arc r = 1")
        self.grid = grid
        free = np.ones(grid.shape, dtype=bool)
        free[-1, :] = False
        self.free = free
        self.free_flat = np.flatnonzero(free.ravel())
        self.n_free_node = self.free_flat.size
        u0, v0 = cone_fields(grid)
        self.u_arc = u0[:, -1, :].copy()
        self.v_arc = v0[-1, :].copy()
        self.v_ghost = np.full(grid.n_phi, grid.r_ghost)

    @property
    def size(self) -> int:
        return 3 * self.n_free_node

    def pack(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        f = self.free_flat
        return np.concatenate([u[0].ravel()[f], u[1].ravel()[f], v.ravel()[f]])

    def unpack(self, x: np.ndarray):
        """Return full nodal ``u`` (2, n_r, n_phi) and ``v`` with constraints applied."""
        n, f, shape = self.n_free_node, self.free_flat, self.grid.shape
        u = np.empty((2,) + shape)
        v = np.empty(shape)
        u[:, -1, :] = self.u_arc
        v[-1, :] = self.v_arc
        u[0].ravel()[f] = x[:n]
        u[1].ravel()[f] = x[n:2 * n]
        v.ravel()[f] = x[2 * n:]
        return u, v

    def v_extended(self, v: np.ndarray) -> np.ndarray:
        return np.concatenate((v.ravel(), self.v_ghost))

    def restrict(self, gu1, gu2, gv) -> np.ndarray:
        """Free-DOF part of nodal gradient arrays (constrained entries dropped)."""
        f = self.free_flat
        return np.concatenate([gu1[f], gu2[f], gv[f]])


@dataclass(frozen=True, eq=False)
class DofVector:
    layout: DofLayout
    x: np.ndarray

    @classmethod
    def from_fields(cls, layout: DofLayout, u, v) -> "DofVector":
        return cls(layout, layout.pack(u, v))

    def fields(self):
        return self.layout.unpack(self.x)

    def axpy(self, a: float, d: np.ndarray) -> "DofVector":
        return DofVector(self.layout, self.x + a * d)


def apply_boundary_conditions(u: np.ndarray, v: np.ndarray, grid: PolarGrid):
    """Return copies of ``(u, v)`` pinned to the cone on the arc, and the ghost ring.

    The returned ghost ring holds ``v = |x|`` at ``r_ghost`` so the centered
    radial stencil at ``r = 1`` sees the cone slope.
    """
    layout = DofLayout(grid)
    u = np.array(u, dtype=float, copy=True)
    v = np.array(v, dtype=float, copy=True)
    u[:, -1, :] = layout.u_arc
    v[-1, :] = layout.v_arc
    return u, v, layout.v_ghost.copy()


class FvkEnergy:
    """Energy functional on one grid; evaluates values and exact gradients."""

    def __init__(self, spec: SectorSpec, grid: PolarGrid, penalty_weight: float = 0.0):
        if penalty_weight < 0:
            raise ValueError("penalty weight must be >= 0")
        self.spec = spec
        self.grid = grid
        self.h = spec.h
        self.penalty_weight = float(penalty_weight)
        self.layout = DofLayout(grid)
        self.ops_u = diff_ops(grid, ghost=False)
        self.ops_v = diff_ops(grid, ghost=True)
        self.w = grid.cell_weights.ravel()

    # -- raw evaluation ------------------------------------------------
    def _state(self, x):
        u, v = self.layout.unpack(x)
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise FloatingPointError("NaN or inf in the unknowns")
        ve = self.layout.v_extended(v)
        ou, ov = self.ops_u, self.ops_v
        u1, u2 = u[0].ravel(), u[1].ravel()
        gx, gy = ov.dx @ ve, ov.dy @ ve
        m11 = 2 * (ou.dx @ u1) + gx * gx
        m12 = ou.dy @ u1 + ou.dx @ u2 + gx * gy
        m22 = 2 * (ou.dy @ u2) + gy * gy
        hxx, hxy, hyy = ov.dxx @ ve, ov.dxy @ ve, ov.dyy @ ve
        return dict(gx=gx, gy=gy, m11=m11, m12=m12, m22=m22, hxx=hxx, hxy=hxy, hyy=hyy)

    def densities(self, x) -> dict:
        """Nodal membrane, bending (including ``h^2``) and penalty densities."""
        st = self._state(x)
        memb = st["m11"] ** 2 + 2 * st["m12"] ** 2 + st["m22"] ** 2
        bend = self.h**2 * (st["hxx"] ** 2 + 2 * st["hxy"] ** 2 + st["hyy"] ** 2)
        lam = 0.5 * (st["hxx"] + st["hyy"]) - np.hypot(0.5 * (st["hxx"] - st["hyy"]), st["hxy"])
        pen = self.penalty_weight * np.maximum(0.0, -lam) ** 2
        shape = self.grid.shape
        return {"membrane": memb.reshape(shape), "bending": bend.reshape(shape),
                "penalty": pen.reshape(shape)}

    def breakdown(self, x) -> EnergyBreakdown:
        d = self.densities(x)
        w = self.grid.cell_weights
        return EnergyBreakdown(membrane=float(np.sum(d["membrane"] * w)),
                               bending=float(np.sum(d["bending"] * w)),
                               penalty=float(np.sum(d["penalty"] * w)), h=self.h)

    def value_and_grad(self, x, terms=("membrane", "bending", "penalty")):
        """Total of the selected terms and its gradient w.r.t. the free DOFs."""
        st = self._state(x)
        w = self.w
        ou, ov = self.ops_u, self.ops_v
        N = self.grid.size
        val = 0.0
        parts = {"membrane": 0.0, "bending": 0.0, "penalty": 0.0}
        gu1 = np.zeros(N)
        gu2 = np.zeros(N)
        gve = np.zeros(N + self.grid.n_phi)
        if "membrane" in terms:
            m11, m12, m22, gx, gy = st["m11"], st["m12"], st["m22"], st["gx"], st["gy"]
            parts["membrane"] = float(np.sum(w * (m11**2 + 2 * m12**2 + m22**2)))
            val += parts["membrane"]
            a11, a12, a22 = 4 * w * m11, 4 * w * m12, 4 * w * m22
            gu1 += ou.dx.T @ a11 + ou.dy.T @ a12
            gu2 += ou.dx.T @ a12 + ou.dy.T @ a22
            gve += ov.dx.T @ (a11 * gx + a12 * gy) + ov.dy.T @ (a12 * gx + a22 * gy)
        if "bending" in terms:
            hxx, hxy, hyy = st["hxx"], st["hxy"], st["hyy"]
            c = self.h**2
            parts["bending"] = c * float(np.sum(w * (hxx**2 + 2 * hxy**2 + hyy**2)))
            val += parts["bending"]
            gve += 2 * c * (ov.dxx.T @ (w * hxx) + ov.dxy.T @ (2 * w * hxy) + ov.dyy.T @ (w * hyy))
        if "penalty" in terms and self.penalty_weight > 0:
            pv, pg = _penalty_terms(st["hxx"], st["hxy"], st["hyy"], w, self.penalty_weight)
            parts["penalty"] = pv
            val += pv
            gve += ov.dxx.T @ pg[0] + ov.dxy.T @ pg[1] + ov.dyy.T @ pg[2]
        self.last_parts = parts
        return val, self.layout.restrict(gu1, gu2, gve[:N])

    def __call__(self, x):
        return self.value_and_grad(x)


def _penalty_terms(a, b, c, w, weight):
    half_diff = 0.5 * (a - c)
    q = np.hypot(half_diff, b)
    lam = 0.5 * (a + c) - q
    neg = np.maximum(0.0, -lam)
    value = weight * float(np.sum(w * neg**2))
    dlam = -2.0 * weight * w * neg
    safe = np.where(q > 0, q, 1.0)
    da = np.where(q > 0, 0.5 - 0.5 * half_diff / safe, 0.5)
    dc = np.where(q > 0, 0.5 + 0.5 * half_diff / safe, 0.5)
    db = np.where(q > 0, -b / safe, 0.0)
    return value, (dlam * da, dlam * db, dlam * dc)


def convexity_penalty(v: np.ndarray, grid: PolarGrid, weight: float, ghost_values=None):
    """Penalty value and its gradient w.r.t. nodal ``v`` (ghost entries excluded)."""
    if weight < 0:
        raise ValueError("weight must be >= 0")
    ghost = ghost_values is not None
    ops = diff_ops(grid, ghost)
    ve = np.concatenate((v.ravel(), ghost_values)) if ghost else v.ravel()
    a, b, c = ops.dxx @ ve, ops.dxy @ ve, ops.dyy @ ve
    value, pg = _penalty_terms(a, b, c, grid.cell_weights.ravel(), weight)
    grad = ops.dxx.T @ pg[0] + ops.dxy.T @ pg[1] + ops.dyy.T @ pg[2]
    return value, grad[: grid.size].reshape(grid.shape)


def energy(dofs: DofVector, spec: SectorSpec, penalty_weight: float = 0.0) -> EnergyBreakdown:
    return FvkEnergy(spec, dofs.layout.grid, penalty_weight).breakdown(dofs.x)


def energy_gradient(dofs: DofVector, spec: SectorSpec, penalty_weight: float = 0.0) -> DofVector:
    _, g = FvkEnergy(spec, dofs.layout.grid, penalty_weight).value_and_grad(dofs.x)
    return DofVector(dofs.layout, g)
