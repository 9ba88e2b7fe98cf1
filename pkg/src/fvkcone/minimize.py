"""Limited-memory BFGS minimization of the discrete energy."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .analytic import competitor_fields
from .energy import DofVector, EnergyBreakdown, FvkEnergy
from .fields import diff_ops, sym_min_eig
from .grid import PolarGrid, SectorSpec

__all__ = [
    "MinimizeOptions",
    "LbfgsOutcome",
    "MinimizeResult",
    "ConvexityCertificate",
    "MinimizationError",
    "lbfgs",
    "minimize",
    "certify",
    "gauss_newton_matrix",
    "gauss_newton_preconditioner",
    "convexity_certificate",
    "write_iteration_log",
]

logger = logging.getLogger(__name__)


class MinimizationError(RuntimeError):
    """Raised when the objective produces NaN; ``dump`` holds the last good state."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass(frozen=True)
class MinimizeOptions:
    max_iters: int = 3000
    grad_tol: float = 1e-6
    memory: int = 10
    c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 50
    penalty_weight: float = 0.0
    # initial inverse Hessian: None, "diagonal" or "gauss-newton"
    preconditioner: str | None = "gauss-newton"
    # iterations per factorization; 1 gives a line-searched Gauss-Newton step
    refresh: int = 1
    # add the tensile membrane stress to the Gauss-Newton matrix
    stress: bool = True

    def __post_init__(self):
        if self.max_iters <= 0 or self.grad_tol <= 0 or self.memory <= 0:
            raise ValueError("max_iters, grad_tol and memory must be positive")
        if not 0.0 < self.c1 < 0.5:
            raise ValueError("c1 must lie in (0, 1/2)")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if self.penalty_weight < 0:
            raise ValueError("penalty weight must be >= 0")
        if self.preconditioner not in (None, "diagonal", "gauss-newton"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")
        if self.refresh <= 0:
            raise ValueError("refresh must be positive")


@dataclass
class LbfgsOutcome:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    converged: bool
    failed: bool
    message: str
    trace: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)


def _two_loop(g, S, Y, rho, h0):
    q = g.copy()
    alphas = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        a = r * (s @ q)
        alphas.append(a)
        q -= a * y
    z = h0(q) if callable(h0) else h0 * q
    if S and not callable(h0):
        # a factorized Hessian already carries the scale; only rescale scalar seeds
        s, y = S[-1], Y[-1]
        z *= (s @ y) / (y @ (h0 * y))
    for (s, y, r), a in zip(zip(S, Y, rho), reversed(alphas)):
        b = r * (y @ z)
        z += (a - b) * s
    return -z


def lbfgs(fun: Callable, x0: np.ndarray, options: MinimizeOptions = MinimizeOptions(),
          gtol_abs: float | None = None, h0: np.ndarray | None = None,
          callback: Callable | None = None) -> LbfgsOutcome:
    """Minimize ``fun(x) -> (f, g)`` by L-BFGS with Armijo backtracking.

    Stops when ``max|g| <= gtol_abs`` (default ``options.grad_tol``). ``h0`` is
    the initial inverse Hessian: a positive diagonal (array) or a callable
    applying a symmetric positive-definite operator. Curvature pairs with
    ``y.s <= 1e-12 |y||s|`` are rejected and the memory is cleared, which
    restarts from a (scaled) steepest-descent step.
    """
    gtol = options.grad_tol if gtol_abs is None else gtol_abs
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f):
        raise MinimizationError("objective is not finite at the initial point", {"x": x})
    if h0 is None:
        h0 = np.ones_like(x)
    elif not callable(h0):
        h0 = np.asarray(h0, dtype=float)
    S, Y, rho = [], [], []
    trace, steps, gnorms = [f], [0.0], [float(np.max(np.abs(g)))]
    message, converged, failed = "max_iters reached", False, False
    it = 0
    for it in range(1, options.max_iters + 1):
        gmax = float(np.max(np.abs(g)))
        if gmax <= gtol:
            converged, message = True, "gradient tolerance reached"
            it -= 1
            break
        d = _two_loop(g, S, Y, rho, h0)
        slope = float(g @ d)
        if slope >= 0:
            S.clear(), Y.clear(), rho.clear()
            d = -(h0(g) if callable(h0) else h0 * g)
            slope = float(g @ d)
        if not S:
            # first step: limit the move to a unit max-norm step
            t = min(1.0, 1.0 / max(np.max(np.abs(d)), 1e-300))
        else:
            t = 1.0
        accepted = False
        for _ in range(options.max_backtracks):
            x_new = x + t * d
            f_new, g_new = fun(x_new)
            if not np.isfinite(f_new):
                if np.isnan(f_new):
                    raise MinimizationError("NaN energy during line search",
                                            {"iteration": it, "x": x, "f": f, "step": t})
            elif f_new <= f + options.c1 * t * slope:
                accepted = True
                break
            t *= options.backtrack
        if not accepted:
            failed, message = True, "line search failed"
            it -= 1
            break
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s), Y.append(y), rho.append(1.0 / sy)
            if len(S) > options.memory:
                S.pop(0), Y.pop(0), rho.pop(0)
        else:
            S.clear(), Y.clear(), rho.clear()
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        steps.append(t)
        gnorms.append(float(np.max(np.abs(g))))
        if callback is not None:
            callback(it, x, f, g)
    else:
        it = options.max_iters
    if not converged and not failed and float(np.max(np.abs(g))) <= gtol:
        converged, message = True, "gradient tolerance reached"
    return LbfgsOutcome(x=x, f=f, grad=g, iterations=it, converged=converged, failed=failed,
                        message=message, trace=trace, steps=steps, grad_norms=gnorms)


@dataclass(frozen=True)
class ConvexityCertificate:
    min_eig: float
    negative_measure: float
    tol: float
    flagged: bool

    def to_dict(self) -> dict:
        return {"min_eig": self.min_eig, "negative_measure": self.negative_measure,
                "tol": self.tol, "flagged": self.flagged}


def convexity_certificate(v: np.ndarray, grid: PolarGrid, ghost_values=None,
                          mask: np.ndarray | None = None) -> ConvexityCertificate:
    """Minimum nodal ``lambda_min(Hess v)`` and the area where it is below ``-tol``.

    ``tol = 1e-6 * max |Hess v|`` (Frobenius).
    """
    ghost = ghost_values is not None and grid.has_ghost
    ops = diff_ops(grid, ghost)
    ve = np.concatenate((v.ravel(), ghost_values)) if ghost else v.ravel()
    a, b, c = ops.dxx @ ve, ops.dxy @ ve, ops.dyy @ ve
    lam = sym_min_eig(a, b, c).reshape(grid.shape)
    frob = np.sqrt(a**2 + 2 * b**2 + c**2)
    tol = 1e-6 * float(frob.max())
    m = np.ones(grid.shape, bool) if mask is None else mask
    neg = (lam < -tol) & m
    measure = float(np.sum(grid.cell_weights[neg]))
    return ConvexityCertificate(min_eig=float(lam[m].min()), negative_measure=measure,
                                tol=tol, flagged=bool(neg.any()))


@dataclass
class MinimizeResult:
    dofs: DofVector
    energy: EnergyBreakdown
    iterations: int
    grad_norm: float
    min_eig: float
    converged: bool
    failed: bool
    message: str
    trace: list
    log: list

    @property
    def fields(self):
        return self.dofs.fields()

    @property
    def grid(self) -> PolarGrid:
        return self.dofs.layout.grid


def _free_columns(E: FvkEnergy) -> np.ndarray:
    """Column indices of the free DOFs in the stacked ``(u1, u2, v_ext)`` space."""
    N, f = E.grid.size, E.layout.free_flat
    return np.concatenate([f, N + f, 2 * N + f])


def gauss_newton_matrix(E: FvkEnergy, x: np.ndarray, margin: float = 0.0,
                        stress: bool = False) -> sp.csr_matrix:
    """Gauss-Newton approximation of the energy Hessian over the free DOFs.

    The membrane strain is linearized at ``x``; the bending term is quadratic
    and enters exactly; penalty nodes with ``lambda_min < margin * |Hess v|``
    contribute the outer product of the gradient of ``lambda_min``. A positive
    margin also stiffens nodes that are about to become active. With
    ``stress`` the tensile part of the membrane stress term
    ``4 grad(dv) . M grad(dv)`` is added, which keeps the matrix positive
    semidefinite.
    """
    st = E._state(x)
    w = E.w
    ou, ov = E.ops_u, E.ops_v
    N = E.grid.size
    Z = sp.csr_matrix((N, N))
    gx, gy = sp.diags(st["gx"]), sp.diags(st["gy"])
    J11 = sp.hstack([2 * ou.dx, Z, 2 * gx @ ov.dx])
    J12 = sp.hstack([ou.dy, ou.dx, gy @ ov.dx + gx @ ov.dy])
    J22 = sp.hstack([Z, 2 * ou.dy, 2 * gy @ ov.dy])
    W = sp.diags(w)
    H = 2 * (J11.T @ W @ J11 + 2 * J12.T @ W @ J12 + J22.T @ W @ J22)
    B = ov.dxx.T @ W @ ov.dxx + 2 * ov.dxy.T @ W @ ov.dxy + ov.dyy.T @ W @ ov.dyy
    H = H + sp.block_diag([sp.csr_matrix((2 * N, 2 * N)), 2 * E.h**2 * B])
    if stress:
        m11, m12, m22 = st["m11"], st["m12"], st["m22"]
        q = np.hypot(0.5 * (m11 - m22), m12)
        mean = 0.5 * (m11 + m22)
        lo, hi = np.maximum(mean - q, 0.0), np.maximum(mean + q, 0.0)
        # positive part of M = lo I + (hi - lo) e e^T, e the top eigenvector
        theta = 0.5 * np.arctan2(2 * m12, m11 - m22)
        ex, ey = np.cos(theta), np.sin(theta)
        p11, p12, p22 = lo + (hi - lo) * ex * ex, (hi - lo) * ex * ey, lo + (hi - lo) * ey * ey
        S = (ov.dx.T @ sp.diags(4 * w * p11) @ ov.dx + ov.dy.T @ sp.diags(4 * w * p22) @ ov.dy
             + ov.dx.T @ sp.diags(4 * w * p12) @ ov.dy + ov.dy.T @ sp.diags(4 * w * p12) @ ov.dx)
        H = H + sp.block_diag([sp.csr_matrix((2 * N, 2 * N)), S])
    if E.penalty_weight > 0:
        a, b, c = st["hxx"], st["hxy"], st["hyy"]
        half, q = 0.5 * (a - c), np.hypot(0.5 * (a - c), b)
        frob = np.sqrt(a * a + 2 * b * b + c * c)
        active = (0.5 * (a + c) - q) < margin * frob
        if active.any():
            safe = np.where(q > 0, q, 1.0)
            da = np.where(q > 0, 0.5 - 0.5 * half / safe, 0.5)
            dc = np.where(q > 0, 0.5 + 0.5 * half / safe, 0.5)
            db = np.where(q > 0, -b / safe, 0.0)
            L = sp.diags(da) @ ov.dxx + sp.diags(db) @ ov.dxy + sp.diags(dc) @ ov.dyy
            P = L.T @ sp.diags(2 * E.penalty_weight * w * active) @ L
            H = H + sp.block_diag([sp.csr_matrix((2 * N, 2 * N)), P])
    cols = _free_columns(E)
    return H.tocsr()[cols][:, cols].tocsc()


def gauss_newton_preconditioner(E: FvkEnergy, x: np.ndarray, shift: float = 1e-10,
                                margin: float = 0.0, stress: bool = False):
    """Callable applying the inverse of the (shifted) Gauss-Newton matrix."""
    H = gauss_newton_matrix(E, x, margin, stress)
    d = H.diagonal()
    H = H + sp.diags(shift * max(float(d.max()), 1e-300) * np.ones_like(d))
    # the matrix is symmetric: minimum degree on A + A^T with diagonal pivoting
    lu = spla.splu(H.tocsc(), permc_spec="MMD_AT_PLUS_A",
                   options=dict(SymmetricMode=True, DiagPivotThresh=0.0))
    return lu.solve


def _diag_precond(E: FvkEnergy, x: np.ndarray) -> np.ndarray:
    """Inverse of the Gauss-Newton diagonal, normalized to max 1."""
    d = gauss_newton_matrix(E, x).diagonal()
    inv = 1.0 / np.maximum(d, 1e-12 * d.max())
    return inv / inv.max()


def minimize(spec: SectorSpec, grid: PolarGrid, init=None,
             options: MinimizeOptions = MinimizeOptions()) -> MinimizeResult:
    """Minimize the energy starting from ``init = (u, v)`` (default: the competitor).

    The stopping tolerance is ``options.grad_tol * h^2`` on the max-norm of
    the gradient, since the energy itself is of order ``h^2 log(1/h)``. With
    the ``"gauss-newton"`` preconditioner the run is split into cycles of
    ``options.refresh`` iterations; each cycle refactorizes the preconditioner
    at the current iterate and starts with an empty curvature memory.
    """
    E = FvkEnergy(spec, grid, options.penalty_weight)
    layout = E.layout
    if init is None:
        init = competitor_fields(grid, spec.h)
    u0, v0 = init
    x = layout.pack(np.asarray(u0), np.asarray(v0))
    E.value_and_grad(x)
    log = [dict(E.last_parts)]

    def record(it, x, f, g):
        log.append(dict(E.last_parts))

    gtol = options.grad_tol * spec.h**2
    trace, steps, gnorms = [], [], []
    remaining, done = options.max_iters, 0
    while True:
        if options.preconditioner == "gauss-newton":
            h0 = gauss_newton_preconditioner(E, x, stress=options.stress)
            budget = min(options.refresh, remaining)
        else:
            h0 = _diag_precond(E, x) if options.preconditioner == "diagonal" else None
            budget = remaining
        cycle = replace(options, max_iters=budget)
        out = lbfgs(E, x, cycle, gtol_abs=gtol, h0=h0, callback=record)
        skip = 1 if trace else 0
        trace += out.trace[skip:]
        steps += out.steps[skip:]
        gnorms += out.grad_norms[skip:]
        x = out.x
        done += out.iterations
        remaining = options.max_iters - done
        if out.converged or remaining <= 0 or (out.failed and out.iterations == 0):
            break
    # lbfgs leaves E.last_parts at the last trial point; the log only keeps accepted ones
    breakdown = E.breakdown(x)
    u, v = layout.unpack(x)
    cert = convexity_certificate(v, grid, layout.v_ghost)
    for k, (row, f, step, gn) in enumerate(zip(log, trace, steps, gnorms)):
        row.update(iter=k, total=f, grad_norm=gn, step_length=step)
    del log[len(trace):]
    message = out.message
    logger.info("minimize h=%g: %s after %d iterations, E=%.6e", spec.h, message, done,
                breakdown.total)
    return MinimizeResult(dofs=DofVector(layout, x), energy=breakdown, iterations=done,
                          grad_norm=float(np.max(np.abs(out.grad))), min_eig=cert.min_eig,
                          converged=out.converged, failed=out.failed, message=message,
                          trace=trace, log=log)


def certify(result: MinimizeResult) -> ConvexityCertificate:
    u, v = result.fields
    return convexity_certificate(v, result.grid, result.dofs.layout.v_ghost)


def write_iteration_log(result: MinimizeResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["iter", "total", "membrane", "bending", "grad_norm", "step_length"]
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for row in result.log:
            wr.writerow({c: row.get(c, math.nan) for c in cols})
    return path
