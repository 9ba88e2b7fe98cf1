"""Nodal fields on a :class:`~fvkcone.grid.PolarGrid` and their calculus.

Derivatives are second-order finite differences in ``(r, phi)`` assembled as
sparse matrices and mapped to Cartesian components, so every tensor handed
out here is in the ``(x, y)`` frame. Radial stencils are polynomial-exact;
angular stencils are exact on ``{1, cos, sin}`` (plus ``sin 2t`` for the
one-sided second derivative), which makes linear Cartesian fields and the
cone ``|x|`` differentiate without truncation error.

When the grid carries a ghost ring, operators built with ``ghost=True`` take
an input vector of length ``size + n_phi`` whose tail holds the ghost values
and use centered stencils on the last ring.
"""

from __future__ import annotations

import functools
import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .grid import PolarGrid, grid_from_header

__all__ = [
    "ScalarField",
    "VectorField",
    "SymMatrixField",
    "DiffOps",
    "diff_ops",
    "gradient",
    "hessian",
    "integrate",
    "det_hessian",
    "min_eig_hessian",
    "cofactor",
    "sym_det",
    "sym_min_eig",
    "save_field",
    "load_field",
    "EmptyMaskWarning",
]


class EmptyMaskWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# field containers


def _check_finite(values):
    if not np.all(np.isfinite(values)):
        raise ValueError("field contains NaN or inf")


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: PolarGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(f"expected shape {self.grid.shape}, got {vals.shape}")
        _check_finite(vals)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, eq=False)
class VectorField:
    """Cartesian components ``values[0] = x``, ``values[1] = y``."""

    grid: PolarGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (2,) + self.grid.shape:
            raise ValueError(f"expected shape {(2,) + self.grid.shape}, got {vals.shape}")
        _check_finite(vals)
        object.__setattr__(self, "values", vals)

    def norm(self) -> np.ndarray:
        return np.hypot(self.values[0], self.values[1])


@dataclass(frozen=True, eq=False)
class SymMatrixField:
    """Symmetric 2x2 tensor field stored as ``(xx, xy, yy)``."""

    grid: PolarGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (3,) + self.grid.shape:
            raise ValueError(f"expected shape {(3,) + self.grid.shape}, got {vals.shape}")
        _check_finite(vals)
        object.__setattr__(self, "values", vals)

    @property
    def xx(self):
        return self.values[0]

    @property
    def xy(self):
        return self.values[1]

    @property
    def yy(self):
        return self.values[2]

    def frobenius_sq(self) -> np.ndarray:
        return self.xx**2 + 2 * self.xy**2 + self.yy**2


# ---------------------------------------------------------------------------
# stencil weights


def _poly_weights(x0: float, xs: np.ndarray, order: int) -> np.ndarray:
    """Weights exact for polynomials of degree < len(xs) (scaled Vandermonde)."""
    xs = np.asarray(xs, dtype=float)
    scale = np.max(np.abs(xs - x0))
    t = (xs - x0) / scale
    n = xs.size
    A = np.vander(t, n, increasing=True).T
    b = np.zeros(n)
    b[order] = float(np.prod(np.arange(1, order + 1)))
    return np.linalg.solve(A, b) / scale**order


def _trig_basis(t: np.ndarray, d: float, n: int) -> np.ndarray:
    # span{1, sin, cos, sin 2t} rewritten so that it is well conditioned for small d
    s2 = np.sin(0.5 * t) ** 2
    rows = [np.ones_like(t), np.sin(t) / d, 2.0 * s2 / d**2, 4.0 * np.sin(t) * s2 / d**3]
    return np.array(rows[:n])


def _trig_weights(offsets: np.ndarray, d: float, order: int) -> np.ndarray:
    """Weights at ``t = offsets*d`` evaluating the ``order``-th derivative at 0.

    Exact on ``{1, sin t, cos t}`` (three points) and additionally ``sin 2t``
    (four points).
    """
    t = np.asarray(offsets, dtype=float) * d
    n = t.size
    A = _trig_basis(t, d, n)
    # derivatives at 0 of the rescaled basis: 1, t/d, t^2/(2 d^2), t^3/d^3 to leading order
    b = np.zeros(n)
    if order == 1:
        b[1] = 1.0 / d
    elif order == 2:
        b[2] = 1.0 / d**2
    else:
        raise ValueError("order must be 1 or 2")
    return np.linalg.solve(A, b)


def _radial_1d(r: np.ndarray, r_ghost: float | None, order: int) -> sp.csr_matrix:
    n = r.size
    ghost = r_ghost is not None
    nodes = np.concatenate((r, [r_ghost])) if ghost else r
    rows, cols, vals = [], [], []
    for i in range(n):
        if 0 < i < n - 1 or (i == n - 1 and ghost):
            idx = [i - 1, i, i + 1]
        elif i == 0:
            idx = list(range(0, order + 2))
        else:
            idx = list(range(n - order - 2, n))
        w = _poly_weights(nodes[i], nodes[idx], order)
        rows += [i] * len(idx)
        cols += idx
        vals += list(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, nodes.size))


def _angular_1d(n: int, d: float, order: int) -> sp.csr_matrix:
    interior = _trig_weights(np.array([-1, 0, 1]), d, order)
    k = order + 2
    left = _trig_weights(np.arange(k), d, order)
    # mirrored right edge keeps the operator exactly reflection-symmetric
    right = left[::-1] * (-1) ** order
    rows, cols, vals = [], [], []
    for j in range(n):
        if j == 0:
            idx, w = list(range(k)), left
        elif j == n - 1:
            idx, w = list(range(n - k, n)), right
        else:
            idx, w = [j - 1, j, j + 1], interior
        rows += [j] * len(idx)
        cols += idx
        vals += list(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@dataclass(frozen=True, eq=False)
class DiffOps:
    """Sparse Cartesian derivative operators for one grid.

    Each attribute maps a flattened nodal vector (with ghost tail when
    ``ghost``) to nodal derivative values on the real nodes.
    """

    dx: sp.csr_matrix
    dy: sp.csr_matrix
    dxx: sp.csr_matrix
    dxy: sp.csr_matrix
    dyy: sp.csr_matrix
    dphi: sp.csr_matrix
    ghost: bool


@functools.lru_cache(maxsize=16)
def diff_ops(grid: PolarGrid, ghost: bool = False) -> DiffOps:
    if ghost and not grid.has_ghost:
        raise ValueError("grid has no ghost ring")
    r_ghost = grid.r_ghost if ghost else None
    n_phi = grid.n_phi
    Dr1 = _radial_1d(grid.r, r_ghost, 1)
    Drr1 = _radial_1d(grid.r, r_ghost, 2)
    n_cols_r = Dr1.shape[1]
    # identity in r restricted to real rows
    Er = sp.eye(grid.n_r, n_cols_r, format="csr")
    Dp1 = _angular_1d(n_phi, grid.dphi, 1)
    Dpp1 = _angular_1d(n_phi, grid.dphi, 2)
    Ep = sp.eye(n_phi, format="csr")

    Dr = sp.kron(Dr1, Ep, format="csr")
    Drr = sp.kron(Drr1, Ep, format="csr")
    Dp = sp.kron(Er, Dp1, format="csr")
    Dpp = sp.kron(Er, Dpp1, format="csr")
    Drp = sp.kron(Dr1, Dp1, format="csr")

    r = grid.R.ravel()
    c = np.cos(grid.PHI).ravel()
    s = np.sin(grid.PHI).ravel()

    def diag(a):
        return sp.diags(a, format="csr")

    dx = diag(c) @ Dr - diag(s / r) @ Dp
    dy = diag(s) @ Dr + diag(c / r) @ Dp
    h_rr = Drr
    h_rp = diag(1 / r) @ Drp - diag(1 / r**2) @ Dp
    h_pp = diag(1 / r) @ Dr + diag(1 / r**2) @ Dpp
    dxx = diag(c * c) @ h_rr - diag(2 * c * s) @ h_rp + diag(s * s) @ h_pp
    dxy = diag(c * s) @ h_rr + diag(c * c - s * s) @ h_rp - diag(c * s) @ h_pp
    dyy = diag(s * s) @ h_rr + diag(2 * c * s) @ h_rp + diag(c * c) @ h_pp
    ops = [m.tocsr() for m in (dx, dy, dxx, dxy, dyy, Dp)]
    for m in ops:
        m.eliminate_zeros()
        m.sort_indices()
    return DiffOps(*ops, ghost=ghost)


def _flat_input(v, ghost_values, grid):
    vals = v.values if isinstance(v, ScalarField) else np.asarray(v, dtype=float)
    if vals.shape != grid.shape:
        raise ValueError(f"expected shape {grid.shape}, got {vals.shape}")
    if ghost_values is None:
        return vals.ravel(), False
    g = np.broadcast_to(np.asarray(ghost_values, dtype=float), (grid.n_phi,))
    return np.concatenate((vals.ravel(), g)), True


def gradient(v: ScalarField, ghost_values=None) -> VectorField:
    """Cartesian gradient; ``ghost_values`` (length ``n_phi``) activates the ghost ring."""
    grid = v.grid
    flat, ghost = _flat_input(v, ghost_values, grid)
    ops = diff_ops(grid, ghost)
    return VectorField(grid, np.stack([(ops.dx @ flat).reshape(grid.shape),
                                       (ops.dy @ flat).reshape(grid.shape)]))


def hessian(v: ScalarField, ghost_values=None) -> SymMatrixField:
    grid = v.grid
    flat, ghost = _flat_input(v, ghost_values, grid)
    ops = diff_ops(grid, ghost)
    return SymMatrixField(grid, np.stack([(m @ flat).reshape(grid.shape)
                                          for m in (ops.dxx, ops.dxy, ops.dyy)]))


def integrate(f, mask=None, grid: PolarGrid | None = None) -> float:
    """Quadrature ``sum(f * cell_weights)`` over ``mask`` (all nodes by default)."""
    if isinstance(f, ScalarField):
        grid, vals = f.grid, f.values
    else:
        if grid is None:
            raise ValueError("grid required for raw arrays")
        vals = np.asarray(f, dtype=float)
    w = grid.cell_weights
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            warnings.warn("integration mask is empty", EmptyMaskWarning, stacklevel=2)
            return 0.0
        return float(np.sum(vals[mask] * w[mask]))
    return float(np.sum(vals * w))


# ---------------------------------------------------------------------------
# pointwise matrix quantities


def sym_det(a, b, c):
    return a * c - b * b


def sym_min_eig(a, b, c):
    return 0.5 * (a + c) - np.hypot(0.5 * (a - c), b)


def det_hessian(v: ScalarField, ghost_values=None) -> ScalarField:
    H = hessian(v, ghost_values) if isinstance(v, ScalarField) else v
    return ScalarField(H.grid, sym_det(H.xx, H.xy, H.yy))


def min_eig_hessian(v: ScalarField, ghost_values=None) -> ScalarField:
    H = hessian(v, ghost_values) if isinstance(v, ScalarField) else v
    return ScalarField(H.grid, sym_min_eig(H.xx, H.xy, H.yy))


def cofactor(M: SymMatrixField) -> SymMatrixField:
    """``cof M = [[M_yy, -M_xy], [-M_xy, M_xx]]``."""
    return SymMatrixField(M.grid, np.stack([M.yy, -M.xy, M.xx]))


# ---------------------------------------------------------------------------
# persistence


def _checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def save_field(path, values: np.ndarray, grid: PolarGrid, role: str,
               grid_file: str | None = None) -> Path:
    """Write ``<path>.bin`` (little-endian float64, r-major) and ``<path>.json``.

    The grid header is written next to it (``grid.json`` unless ``grid_file``
    names another file) and the sidecar refers to it by name.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(values, dtype="<f8")
    if data.shape[-2:] != grid.shape:
        raise ValueError("field does not match grid")
    grid_name = grid_file or "grid.json"
    grid_path = path.parent / grid_name
    grid_path.write_text(json.dumps(grid.header(), indent=2, sort_keys=True))
    path.with_suffix(".bin").write_bytes(data.tobytes())
    sidecar = {"grid": grid_name, "role": role, "shape": list(data.shape),
               "dtype": "<f8", "order": "r-major", "checksum": _checksum(data)}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    return path.with_suffix(".bin")


def load_field(path) -> tuple[np.ndarray, PolarGrid, dict]:
    """Inverse of :func:`save_field`; verifies the checksum."""
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    header = json.loads((path.parent / sidecar["grid"]).read_text())
    grid = grid_from_header(header)
    data = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    data = data.reshape(sidecar["shape"]).astype(float)
    if _checksum(data) != sidecar["checksum"]:
        raise ValueError(f"checksum mismatch for {path}")
    return data, grid, sidecar
