"""Command-line entry point ``fvkcone``.

Usage::

    fvkcone <command> [--config FILE] [--alpha R] [--h R] [--nr N] [--nphi N]
                      [--out DIR] [--workers N] [--seed N]
                      [--override-proof-scales beta=R,hstar=R]

Commands: ``competitor``, ``minimize``, ``sweep``, ``diagnose``, ``ma-check``.
Exit status: 0 on success, 2 on solver failure, 3 on configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import competitor_energy_closed_form, competitor_fields, test_function_phi
from .diagnostics import DiagnosticsError, monge_ampere_check, run_diagnostics, write_polylines
from .energy import DofLayout, FvkEnergy
from .fields import load_field, save_field
from .grid import DEFAULT_ALPHA, GridError, PolarGrid, SpecError, build_grid, build_spec
from .minimize import MinimizationError, MinimizeOptions, minimize, write_iteration_log
from .sweep import (DEFAULT_H_LIST, ResolutionPolicy, SweepOptions, bounds_report, fit_scaling,
                    run_sweep, write_sweep_csv, write_sweep_json, write_sweep_svg)

__all__ = ["ConfigError", "RunConfig", "parse_config", "run", "main",
           "EXIT_OK", "EXIT_SOLVER", "EXIT_CONFIG"]

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3
COMMANDS = ("competitor", "minimize", "sweep", "diagnose", "ma-check")
logger = logging.getLogger("fvkcone")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; every field has a documented default."""

    command: str
    alpha: float = DEFAULT_ALPHA
    h: float = 0.1
    beta: float | None = None          # proof-scale overrides
    h_star: float | None = None
    n_r: int = 128
    n_phi: int = 64
    grading: str = "loglinear"
    ratio: float | None = None
    r_first: float | None = None       # default h/32
    max_iters: int = 1500
    grad_tol: float = 1e-6
    memory: int = 10
    penalty_weight: float = 0.0
    preconditioner: str = "gauss-newton"
    refresh: int = 1
    h_list: tuple = DEFAULT_H_LIST
    cells_per_h: int = 8
    max_n_r: int = 512
    max_n_phi: int = 256
    penalty_scale: float = 1e5
    n_samples: int = 64
    n_pix: int = 1024
    eps: float | None = None           # ma-check epsilon (default h)
    pairing: bool = True
    input: str | None = None           # directory with persisted u1/u2/v fields
    out: str = "fvkcone_out"
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}")

        if self.command not in COMMANDS:
            bad("command", f"must be one of {', '.join(COMMANDS)}")
        if not 0.0 < self.alpha < math.pi / 2:
            bad("alpha", "alpha must be in (0, pi/2) (radians)")
        if not 0.0 < self.h < 1.0:
            bad("h", "h must be in (0,1)")
        for key in ("n_r", "n_phi"):
            if getattr(self, key) < 8:
                bad(key, "must be >= 8")
        if self.grading not in ("uniform", "geometric", "loglinear"):
            bad("grading", "must be 'uniform', 'geometric' or 'loglinear'")
        for key in ("max_iters", "memory", "refresh", "cells_per_h", "workers", "n_pix"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        if self.grad_tol <= 0:
            bad("grad_tol", "must be positive")
        if self.penalty_weight < 0 or self.penalty_scale < 0:
            bad("penalty_weight", "must be >= 0")
        if self.preconditioner not in ("none", "diagonal", "gauss-newton"):
            bad("preconditioner", "must be 'none', 'diagonal' or 'gauss-newton'")
        if self.n_samples < 64:
            bad("n_samples", "must be >= 64")
        if self.eps is not None and not 0.0 < self.eps < 1.0:
            bad("eps", "must be in (0,1)")
        hs = list(self.h_list)
        if not hs or any(not 0.0 < x < 1.0 for x in hs):
            bad("h_list", "values must be in (0,1)")
        if any(b >= a for a, b in zip(hs, hs[1:])):
            bad("h_list", "must be strictly decreasing")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["h_list"] = list(self.h_list)
        return d

    def digest(self) -> str:
        """SHA-256 of the settings that affect results (``out`` and ``workers`` excluded)."""
        d = {k: v for k, v in self.to_dict().items() if k not in ("out", "workers")}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_FLAG_KEYS = {"alpha": "alpha", "h": "h", "nr": "n_r", "nphi": "n_phi", "out": "out",
              "workers": "workers", "seed": "seed"}


def _coerce(key: str, value):
    f = _FIELDS[key]
    t = str(f.type)
    if value is None:
        if "None" in t:
            return None
        raise ConfigError(f"{key}: may not be null")
    try:
        if key == "h_list":
            return tuple(float(x) for x in value)
        if t.startswith("int"):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if t.startswith("float"):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if t.startswith("bool"):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if t.startswith("str"):
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: invalid value {value!r}") from None
    return value


def _parse_overrides(text: str) -> dict:
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise ConfigError(f"override-proof-scales: expected key=value, got {part!r}")
        k, v = (s.strip() for s in part.split("=", 1))
        key = {"beta": "beta", "hstar": "h_star", "h_star": "h_star"}.get(k)
        if key is None:
            raise ConfigError(f"override-proof-scales: unknown key {k!r}")
        try:
            out[key] = float(v)
        except ValueError:
            raise ConfigError(f"override-proof-scales: {k} must be a number") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fvkcone", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--alpha", type=float, help="sector half-angle in radians")
    p.add_argument("--h", type=float, help="thickness parameter in (0,1)")
    p.add_argument("--nr", type=int, help="radial node count")
    p.add_argument("--nphi", type=int, help="angular node count")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="parallel workers for sweeps")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--override-proof-scales", metavar="beta=R,hstar=R",
                   help="explicit proof scales beta and h*")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_config(argv=None, file_data: dict | None = None) -> RunConfig:
    """Effective configuration from a JSON file and flags (flags win)."""
    args = build_parser().parse_args(argv)
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {args.config}: {exc}") from None
    if file_data:
        data.update(file_data)
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a JSON object")
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration key")
    if "command" in data and data["command"] != args.command:
        logger.info("command %r from flags overrides %r in file", args.command, data["command"])
    data["command"] = args.command
    for flag, key in _FLAG_KEYS.items():
        val = getattr(args, flag)
        if val is not None:
            data[key] = val
    if args.override_proof_scales:
        data.update(_parse_overrides(args.override_proof_scales))
    clean = {k: _coerce(k, v) for k, v in data.items()}
    return RunConfig(**clean)


# ---------------------------------------------------------------------------
# commands


def _spec(cfg: RunConfig, need_scales: bool):
    """SectorSpec for the run.

    Commands that do not use ``beta``/``h*`` fall back to ``beta = alpha/4`` and
    ``h* = max(h, 1/4)`` when the defaults are rejected; the report says so.
    """
    try:
        return build_spec(cfg.alpha, cfg.h, beta=cfg.beta, h_star=cfg.h_star), "spec"
    except SpecError:
        if need_scales:
            raise
        return (build_spec(cfg.alpha, cfg.h, beta=cfg.alpha / 4, h_star=max(cfg.h, 0.25)),
                "placeholder (unused by this command)")


def _grid(cfg: RunConfig, spec):
    return build_grid(spec, cfg.n_r, cfg.n_phi, grading=cfg.grading, ratio=cfg.ratio,
                      r_first=cfg.r_first)


def _write_json(path: Path, doc: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, allow_nan=True))
    return path


def _save_state(out: Path, u, v, grid: PolarGrid, role: str):
    save_field(out / "u1", u[0], grid, f"{role}:u1")
    save_field(out / "u2", u[1], grid, f"{role}:u2")
    save_field(out / "v", v, grid, f"{role}:v")


def _load_state(directory: str):
    d = Path(directory)
    try:
        u1, grid, _ = load_field(d / "u1")
        u2, _, _ = load_field(d / "u2")
        v, _, meta = load_field(d / "v")
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"input: cannot load fields from {directory}: {exc}") from None
    return np.stack([u1, u2]), v, grid


def _base(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.digest(), "config": cfg.to_dict(), "version": __version__}


def _cmd_competitor(cfg: RunConfig, out: Path) -> int:
    spec, scales = _spec(cfg, need_scales=False)
    grid = _grid(cfg, spec)
    u, v = competitor_fields(grid, cfg.h)
    E = FvkEnergy(spec, grid)
    discrete = E.breakdown(E.layout.pack(u, v))
    closed = competitor_energy_closed_form(cfg.h, cfg.alpha)
    _save_state(out / "fields", u, v, grid, "competitor")
    doc = _base(cfg)
    doc.update({"proof_scales": scales, "spec": spec.to_dict(), "grid": grid.header(),
                "discrete": discrete.to_dict(), "closed_form": closed.to_dict(),
                "truncated_area": grid.truncated_area})
    _write_json(out / "competitor.json", doc)
    return EXIT_OK


def _cmd_minimize(cfg: RunConfig, out: Path) -> int:
    spec, scales = _spec(cfg, need_scales=False)
    grid = _grid(cfg, spec)
    opts = MinimizeOptions(max_iters=cfg.max_iters, grad_tol=cfg.grad_tol, memory=cfg.memory,
                           penalty_weight=cfg.penalty_weight, refresh=cfg.refresh,
                           preconditioner=None if cfg.preconditioner == "none"
                           else cfg.preconditioner)
    doc = _base(cfg)
    try:
        res = minimize(spec, grid, options=opts)
    except MinimizationError as exc:
        doc.update({"error": str(exc), "dump": {k: (v.tolist() if isinstance(v, np.ndarray)
                                                    else v) for k, v in exc.dump.items()}})
        _write_json(out / "minimize.json", doc)
        return EXIT_SOLVER
    u, v = res.fields
    _save_state(out / "fields", u, v, grid, "minimizer")
    write_iteration_log(res, out / "iterations.csv")
    closed = competitor_energy_closed_form(cfg.h, cfg.alpha)
    doc.update({"proof_scales": scales, "spec": spec.to_dict(), "grid": grid.header(),
                "energy": res.energy.to_dict(), "competitor": closed.to_dict(),
                "iterations": res.iterations, "grad_norm": res.grad_norm,
                "min_eig": res.min_eig, "converged": res.converged, "failed": res.failed,
                "message": res.message})
    _write_json(out / "minimize.json", doc)
    return EXIT_SOLVER if res.failed else EXIT_OK


def _cmd_sweep(cfg: RunConfig, out: Path) -> int:
    policy = ResolutionPolicy(cells_per_h=cfg.cells_per_h, n_r=cfg.n_r, n_phi=cfg.n_phi,
                              max_n_r=cfg.max_n_r, max_n_phi=cfg.max_n_phi, grading=cfg.grading,
                              ratio=cfg.ratio)
    options = SweepOptions(alpha=cfg.alpha, beta=cfg.beta,
                           h_star=0.25 if cfg.h_star is None else cfg.h_star,
                           penalty_scale=cfg.penalty_scale, max_iters=cfg.max_iters,
                           grad_tol=cfg.grad_tol, refresh=cfg.refresh,
                           n_samples=cfg.n_samples)
    records = run_sweep(cfg.h_list, policy, options, workers=cfg.workers)
    try:
        fit = fit_scaling(records)
    except ValueError as exc:
        logger.warning("no scaling fit: %s", exc)
        fit = None
    extra = _base(cfg)
    extra.update({"policy": policy.to_dict(), "options": options.to_dict()})
    write_sweep_csv(records, out / "sweep.csv")
    write_sweep_json(records, fit, out / "sweep.json", extra)
    if any(r.ok for r in records):
        write_sweep_svg(records, fit, out / "sweep.svg")
    for row in bounds_report(records, fit):
        logger.info("h=%.4g E/(2 alpha h^2)=%.4f C_upper=%.4f", row["h"], row["e_scaled"],
                    row["C_upper"])
    return EXIT_SOLVER if any(not r.ok for r in records) else EXIT_OK


def _state_for(cfg: RunConfig, spec):
    if cfg.input:
        u, v, grid = _load_state(cfg.input)
        if abs(grid.alpha - cfg.alpha) > 1e-15:
            raise ConfigError("alpha: does not match the persisted grid")
        ghost = None
        if grid.has_ghost:
            ghost = DofLayout(grid).v_ghost
        return u, v, grid, ghost, "input:" + cfg.input
    grid = _grid(cfg, spec)
    u, v = competitor_fields(grid, cfg.h)
    return u, v, grid, DofLayout(grid).v_ghost, "competitor"


def _cmd_diagnose(cfg: RunConfig, out: Path) -> int:
    spec, _ = _spec(cfg, need_scales=True)
    u, v, grid, ghost, source = _state_for(cfg, spec)
    phi = None
    if cfg.pairing:
        phi = test_function_phi(spec, grid.extended(2.0))
    report = run_diagnostics(u, v, grid, spec, phi=phi, eps=cfg.eps, n_samples=cfg.n_samples,
                             ghost_values=ghost, n_pix=cfg.n_pix, config_hash=cfg.digest())
    doc = _base(cfg)
    doc.update({"source": source, "spec": spec.to_dict(), "report": report.to_dict()})
    _write_json(out / "diagnostics.json", doc)
    write_polylines(report.bad_angles, out / "slope_curves.csv")
    return EXIT_OK


def _cmd_ma_check(cfg: RunConfig, out: Path) -> int:
    spec, _ = _spec(cfg, need_scales=False)
    u, v, grid, ghost, source = _state_for(cfg, spec)
    eps = cfg.h if cfg.eps is None else cfg.eps
    rep = monge_ampere_check(v, grid, eps, ghost_values=ghost)
    doc = _base(cfg)
    doc.update({"source": source, "ma_check": rep.to_dict()})
    _write_json(out / "ma_check.json", doc)
    return EXIT_OK


_COMMANDS = {"competitor": _cmd_competitor, "minimize": _cmd_minimize, "sweep": _cmd_sweep,
             "diagnose": _cmd_diagnose, "ma-check": _cmd_ma_check}


def run(cfg: RunConfig) -> int:
    """Dispatch ``cfg.command``; writes the effective config next to the outputs."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "effective_config.json", {"config_hash": cfg.digest(),
                                                **cfg.to_dict()})
    try:
        return _COMMANDS[cfg.command](cfg, out)
    except (ConfigError, SpecError, GridError) as exc:
        print(f"fvkcone: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MinimizationError, DiagnosticsError, FloatingPointError) as exc:
        print(f"fvkcone: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"fvkcone: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if "-v" in (argv or sys.argv[1:])
                        or "--verbose" in (argv or sys.argv[1:]) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
