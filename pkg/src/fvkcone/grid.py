"""Sector geometry, proof scales and the structured polar grid.

The sheet occupies the sector ``S = {r e_phi : 0 < r < 1, |phi| < alpha}``.
The grid is a tensor product of radial nodes ``r_first = r_0 < ... < r_last``
and uniformly spaced angles on ``[-alpha, alpha]``. Nodal arrays are stored
with shape ``(n_r, n_phi)`` (radius-major).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import lambertw

__all__ = [
    "SpecError",
    "GridError",
    "SectorSpec",
    "PolarGrid",
    "build_spec",
    "build_grid",
    "default_r_first",
]

H_STAR_CAP = 0.25
DEFAULT_ALPHA = math.pi / 4


class SpecError(ValueError):
    """Invalid sector parameters or proof scales."""


class GridError(ValueError):
    """Invalid grid construction request."""


@dataclass(frozen=True)
class SectorSpec:
    """Problem parameters together with the derived proof scales.

    ``beta`` shrinks the sector angularly and ``h_star`` radially; they define
    the reduced sectors ``S_h^1 = {|phi| < alpha - beta, r >= h}`` and
    ``S_h^2 = {|phi| < alpha - 2 beta, r >= h_star}``.
    """

    alpha: float
    h: float
    beta: float
    h_star: float
    overridden: tuple = ()

    def __post_init__(self):
        if not 0.0 < self.alpha < math.pi / 2:
            raise SpecError(f"alpha must be in (0, pi/2), got {self.alpha}")
        if not 0.0 < self.h < 1.0:
            raise SpecError(f"h must be in (0,1), got {self.h}")
        if not 0.0 < self.beta < self.alpha / 2:
            raise SpecError(
                f"beta={self.beta:.6g} must lie in (0, alpha/2={self.alpha / 2:.6g}); "
                "the reduced sectors would be empty"
            )
        if not self.h <= self.h_star < 1.0:
            raise SpecError(f"h_star={self.h_star:.6g} must satisfy h <= h_star < 1")

    @property
    def log_inv_h(self) -> float:
        return math.log(1.0 / self.h)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "h": self.h, "beta": self.beta, "h_star": self.h_star}


def build_spec(alpha: float = DEFAULT_ALPHA, h: float = 0.1, beta: float | None = None,
               h_star: float | None = None) -> SectorSpec:
    """Build a :class:`SectorSpec`, filling proof scales from their defaults.

    Defaults are ``beta = 1/log(1/h)`` and ``h_star = min(h log(1/h)^6, 1/4)``.
    A default ``beta`` is only accepted when ``beta <= alpha/4``; for thicker
    sheets both scales have to be passed explicitly.
    """
    if not 0.0 < alpha < math.pi / 2:
        raise SpecError(f"alpha must be in (0, pi/2), got {alpha}")
    if not 0.0 < h < 1.0:
        raise SpecError(f"h must be in (0,1), got {h}")
    L = math.log(1.0 / h)
    overridden = []
    if beta is None:
        beta = 1.0 / L
        if beta > alpha / 4:
            raw_hs = h * L**6
            raise SpecError(
                f"default proof scales are outside the admissible range for h={h:.4g}: "
                f"beta=(log 1/h)^-1={beta:.4g} > alpha/4={alpha / 4:.4g}, "
                f"h*=h(log 1/h)^6={raw_hs:.4g}; pass beta and h_star explicitly"
            )
    else:
        overridden.append("beta")
    if h_star is None:
        h_star = min(h * L**6, H_STAR_CAP)
    else:
        overridden.append("h_star")
    return SectorSpec(alpha=float(alpha), h=float(h), beta=float(beta),
                      h_star=float(h_star), overridden=tuple(overridden))


def default_r_first(h: float) -> float:
    """Inner truncation radius used when none is given (``h/32``)."""
    return h / 32.0


def _symmetric_angles(alpha: float, n_phi: int) -> np.ndarray:
    # integer numerators keep phi[j] == -phi[n-1-j] bit for bit
    k = np.arange(n_phi)
    return alpha * ((2 * k - (n_phi - 1)) / (n_phi - 1))


def _radial_nodes(r_first: float, r_last: float, n_r: int, grading: str,
                  ratio: float | None) -> np.ndarray:
    if grading == "uniform":
        r = r_first + (r_last - r_first) * np.arange(n_r) / (n_r - 1)
    elif grading == "geometric":
        if ratio is None:
            # log-uniform nodes: r_i = r_first * q**i
            t = np.arange(n_r) / (n_r - 1)
            r = r_first * (r_last / r_first) ** t
        else:
            if ratio <= 0:
                raise GridError("geometric ratio must be positive")
            steps = ratio ** np.arange(n_r - 1)
            d0 = (r_last - r_first) / steps.sum()
            r = r_first + np.concatenate(([0.0], np.cumsum(d0 * steps)))
    elif grading == "loglinear":
        # spacing proportional to r c / (r + c): log-uniform below the crossover
        # radius c = ratio, uniform above it; t K = log(r / r_first) + (r - r_first) / c
        c = 0.1 if ratio is None else ratio
        if c <= 0:
            raise GridError("loglinear crossover radius must be positive")
        K = math.log(r_last / r_first) + (r_last - r_first) / c
        t = np.arange(n_r) / (n_r - 1)
        r = c * np.real(lambertw(r_first / c * np.exp(r_first / c + t * K)))
    else:
        raise GridError(f"unknown grading {grading!r}")
    r[0] = r_first
    r[-1] = r_last
    return r


@dataclass(frozen=True, eq=False)
class PolarGrid:
    """Tensor polar grid over ``{r_first <= r <= r_last, |phi| <= alpha}``.

    ``r_ghost`` is the radius of the ghost ring just outside ``r_last`` used to
    clamp the slope of the out-of-plane field; ``None`` when absent.
    """

    alpha: float
    r: np.ndarray
    phi: np.ndarray
    r_ghost: float | None = None
    grading: str = "uniform"
    ratio: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        phi = np.asarray(self.phi, dtype=float)
        if r.ndim != 1 or phi.ndim != 1 or r.size < 3 or phi.size < 3:
            raise GridError("need at least 3 nodes per direction")
        if np.any(np.diff(r) <= 0) or r[0] <= 0:
            raise GridError("radial nodes must be positive and strictly increasing")
        if np.any(np.diff(phi) <= 0):
            raise GridError("angular nodes must be strictly increasing")
        if self.r_ghost is not None and self.r_ghost <= r[-1]:
            raise GridError("ghost ring must lie outside the last ring")
        r.setflags(write=False)
        phi.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "_weights", None)

    # -- shape helpers -------------------------------------------------
    @property
    def n_r(self) -> int:
        return self.r.size

    @property
    def n_phi(self) -> int:
        return self.phi.size

    @property
    def shape(self) -> tuple:
        return (self.n_r, self.n_phi)

    @property
    def size(self) -> int:
        return self.n_r * self.n_phi

    @property
    def has_ghost(self) -> bool:
        return self.r_ghost is not None

    @property
    def r_first(self) -> float:
        return float(self.r[0])

    @property
    def r_last(self) -> float:
        return float(self.r[-1])

    @property
    def dphi(self) -> float:
        return float(self.phi[1] - self.phi[0])

    @property
    def R(self) -> np.ndarray:
        return np.broadcast_to(self.r[:, None], self.shape)

    @property
    def PHI(self) -> np.ndarray:
        return np.broadcast_to(self.phi[None, :], self.shape)

    @property
    def X(self) -> np.ndarray:
        return self.r[:, None] * np.cos(self.phi)[None, :]

    @property
    def Y(self) -> np.ndarray:
        return self.r[:, None] * np.sin(self.phi)[None, :]

    @property
    def truncated_area(self) -> float:
        """Area of the excluded tip disc sector ``r < r_first``."""
        return self.alpha * self.r_first**2

    @property
    def cell_weights(self) -> np.ndarray:
        """Nodal quadrature weights (dual-cell midpoint rule, Jacobian ``r``)."""
        if self._weights is None:
            r = self.r
            mid = 0.5 * (r[1:] + r[:-1])
            edges = np.concatenate(([r[0]], mid, [r[-1]]))
            wr = 0.5 * (edges[1:] ** 2 - edges[:-1] ** 2)
            dp = np.diff(self.phi)
            pe = np.concatenate(([0.0], 0.5 * dp)) + np.concatenate((0.5 * dp, [0.0]))
            w = wr[:, None] * pe[None, :]
            w.setflags(write=False)
            object.__setattr__(self, "_weights", w)
        return self._weights

    # -- masks ---------------------------------------------------------
    def region_mask(self, region: str, spec: SectorSpec | None = None) -> np.ndarray:
        """Boolean node mask for ``"S"``, ``"S1"``, ``"S2"``, ``"2S"`` or ``"unit"``.

        ``"S"`` and ``"unit"`` select nodes with ``r <= 1``; ``"2S"`` selects
        every node. ``"S1"``/``"S2"`` need ``spec`` for ``beta``, ``h``, ``h_star``.
        """
        R, P = self.R, np.abs(self.PHI)
        tol = 1e-12
        if region in ("S", "unit"):
            return R <= 1.0 + tol
        if region == "2S":
            return np.ones(self.shape, dtype=bool)
        if spec is None:
            raise ValueError(f"region {region!r} needs a SectorSpec")
        if region == "S1":
            return (P < spec.alpha - spec.beta) & (R >= spec.h) & (R <= 1.0 + tol)
        if region == "S2":
            return (P < spec.alpha - 2 * spec.beta) & (R >= spec.h_star) & (R <= 1.0 + tol)
        raise ValueError(f"unknown region {region!r}")

    def boundary_indices(self) -> dict:
        """Flat node indices of the arc ``r = r_last`` and the lateral edges."""
        idx = np.arange(self.size).reshape(self.shape)
        return {
            "arc": idx[-1, :].copy(),
            "lateral_minus": idx[:, 0].copy(),
            "lateral_plus": idx[:, -1].copy(),
            "tip": idx[0, :].copy(),
        }

    # -- extension to 2S -----------------------------------------------
    def extended(self, r_max: float = 2.0) -> "PolarGrid":
        """Grid over ``2S`` sharing this grid's nodes for ``r <= r_last``.

        Extra rings continue the grading (equal spacing for uniform and
        log-linear grids, equal ratio for geometric ones) and are stretched to end at ``r_max``.
        """
        r = self.r
        if r_max <= r[-1]:
            raise GridError("r_max must exceed the last ring")
        if self.grading in ("uniform", "loglinear"):
            d = r[-1] - r[-2]
            m = max(2, int(math.ceil((r_max - r[-1]) / d - 1e-9)))
            ext = r[-1] + (r_max - r[-1]) * np.arange(1, m + 1) / m
        else:
            q = r[-1] / r[-2] if self.ratio is None else (r[-1] - r[-2]) / (r[-2] - r[-3])
            if self.ratio is None:
                m = max(2, int(math.ceil(math.log(r_max / r[-1]) / math.log(q) - 1e-9)))
                ext = r[-1] * (r_max / r[-1]) ** (np.arange(1, m + 1) / m)
            else:
                d = (r[-1] - r[-2]) * q ** np.arange(1, 10_000)
                cs = np.cumsum(d)
                m = max(2, int(np.searchsorted(cs, r_max - r[-1])) + 1)
                ext = r[-1] + cs[:m] * (r_max - r[-1]) / cs[m - 1]
        ext[-1] = r_max
        r_new = np.concatenate((r, ext))
        return PolarGrid(alpha=self.alpha, r=r_new, phi=self.phi, r_ghost=None,
                         grading=self.grading, ratio=self.ratio,
                         meta=dict(self.meta, extended_from_n_r=self.n_r, r_max=r_max))

    def header(self) -> dict:
        """Serializable description; :func:`grid_from_header` inverts it."""
        return dict(self.meta, alpha=self.alpha, n_r=self.n_r, n_phi=self.n_phi,
                    grading=self.grading, ratio=self.ratio, r_first=self.r_first,
                    r_last=self.r_last, ghost=self.has_ghost)


def build_grid(spec: SectorSpec, n_r: int, n_phi: int, grading: str = "uniform",
               ratio: float | None = None, r_first: float | None = None,
               ghost: bool = True) -> PolarGrid:
    """Polar grid over the truncated sector ``r_first <= r <= 1``.

    ``grading`` is ``"uniform"``, ``"geometric"`` or ``"loglinear"``. Geometric
    grading with a ``ratio`` uses radial spacings growing by that factor
    outward, without one the nodes are log-uniform. Log-linear grading is
    log-uniform below the crossover radius ``ratio`` (default 0.1) and uniform
    above it, so both the tip and the clamped arc are resolved. The ghost ring sits one last-spacing outside
    ``r = 1``.
    """
    if n_r < 8 or n_phi < 8:
        raise GridError("n_r and n_phi must be >= 8")
    if r_first is None:
        r_first = default_r_first(spec.h)
    if not 0.0 < r_first <= spec.h / 4:
        raise GridError(f"r_first={r_first:.4g} must lie in (0, h/4]")
    r = _radial_nodes(r_first, 1.0, n_r, grading, ratio)
    phi = _symmetric_angles(spec.alpha, n_phi)
    r_ghost = 1.0 + (r[-1] - r[-2]) if ghost else None
    meta = {"h": spec.h, "beta": spec.beta, "h_star": spec.h_star}
    return PolarGrid(alpha=spec.alpha, r=r, phi=phi, r_ghost=r_ghost,
                     grading=grading, ratio=ratio, meta=meta)


def grid_from_header(header: dict) -> PolarGrid:
    """Rebuild a grid from :meth:`PolarGrid.header` output (bit-exact)."""
    hd = dict(header)
    r = _radial_nodes(hd["r_first"], 1.0, hd.get("extended_from_n_r", hd["n_r"]),
                      hd["grading"], hd.get("ratio"))
    phi = _symmetric_angles(hd["alpha"], hd["n_phi"])
    meta = {k: hd[k] for k in ("h", "beta", "h_star") if k in hd}
    base = PolarGrid(alpha=hd["alpha"], r=r, phi=phi,
                     r_ghost=(1.0 + (r[-1] - r[-2])) if hd.get("ghost") else None,
                     grading=hd["grading"], ratio=hd.get("ratio"), meta=meta)
    if "extended_from_n_r" in hd:
        return base.extended(hd["r_max"])
    return base
