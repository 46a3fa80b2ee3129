"""Scenario orchestration: invariance sweeps, cross-solver comparisons,
ledger convergence studies and artifact emission."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ScenarioConfig
from .errors import ConfigError
from .fbsde_mc import McEstimate, representation_check, solve_backward
from .ledger_sim import LedgerReport, convergence_order, replay_many
from .market_model import MarketSpec, Schedule, TimeGrid, simulate_paths
from .pde_engine import SpatialGrid, ValueSurface, solve_dependent, solve_independent

INTERIOR_FRACTION = 0.8


def build_grids(cfg: ScenarioConfig, refine: int = 1) -> tuple[TimeGrid, SpatialGrid]:
    g = cfg.grid.refined(refine) if refine != 1 else cfg.grid
    sgrid = SpatialGrid.around(
        cfg.market.s0, cfg.market.vol, cfg.deal.maturity, g.n_space,
        s_min=g.s_min, width=g.width, s_max=g.s_max,
    )
    return TimeGrid(0.0, cfg.deal.maturity, g.n_time), sgrid


def interior_mask(s: np.ndarray, fraction: float = INTERIOR_FRACTION) -> np.ndarray:
    lo, hi = s[0], s[-1]
    margin = 0.5 * (1.0 - fraction) * (hi - lo)
    return (s >= lo + margin - 1e-12) & (s <= hi - margin + 1e-12)


def richardson_error(fine: ValueSurface, coarse: ValueSurface, order: int = 2) -> float:
    """Error estimate of the fine solution at t0 over the interior.

    The coarse solve is read at the fine nodes through its spline.
    """
    mask = interior_mask(fine.s)
    diff = fine.u[0, mask] - coarse.value_at(fine.t0, fine.s[mask])
    return float(np.max(np.abs(diff)) / (2.0**order - 1.0))


@dataclass(frozen=True)
class InvarianceReport:
    r_values: tuple[float, ...]
    hedge_mode: str
    value_at_s0: tuple[float, ...]
    independent_value_at_s0: float
    per_r_max_abs_dev: tuple[float, ...]
    max_abs_dev: float
    max_rel_dev: float
    grid_error_estimate: float
    n_space: int
    n_time: int
    failed_r: float | None = None
    error: str | None = None

    @property
    def passed(self) -> bool:
        if self.error is not None:
            return False
        return self.max_abs_dev <= 3.0 * self.grid_error_estimate

    CSV_HEADER = ("r", "hedge_mode", "u0_s0", "independent_u0_s0", "max_abs_dev")

    def csv_rows(self) -> list[list[str]]:
        return [
            [f"{r:.12g}", self.hedge_mode, f"{v:.12g}",
             f"{self.independent_value_at_s0:.12g}", f"{d:.12g}"]
            for r, v, d in zip(self.r_values, self.value_at_s0, self.per_r_max_abs_dev)
        ]

    def summary(self) -> dict:
        return {
            "hedge_mode": self.hedge_mode,
            "r_values": list(self.r_values),
            "max_abs_dev": self.max_abs_dev,
            "max_rel_dev": self.max_rel_dev,
            "grid_error_estimate": self.grid_error_estimate,
            "n_space": self.n_space,
            "n_time": self.n_time,
            "passed": self.passed,
            "failed_r": self.failed_r,
            "error": self.error,
        }


def _with_r(market: MarketSpec, r: float) -> MarketSpec:
    return replace(market, r=Schedule.constant(r))


def run_invariance_sweep(
    cfg: ScenarioConfig,
    refine: int = 1,
    r_values: tuple[float, ...] | None = None,
    hedge_mode: str | None = None,
    max_workers: int | None = None,
) -> InvarianceReport:
    """Solve the r-drift PDE per r and the h-drift PDE once; compare u(t0, .).

    Deviations are measured over the interior 80% of the price grid. The
    relative deviation is normalised by the largest |u| of the h-drift
    solution on that interior. The grid error estimate comes from a second
    h-drift solve with both grid sizes halved.
    """
    rs = tuple(cfg.sweep if r_values is None else r_values)
    if not rs:
        raise ConfigError("invariance mode needs a non-empty r sweep", "sweep", "r")
    mode = cfg.hedge_mode if hedge_mode is None else hedge_mode
    grids = build_grids(cfg, refine)
    tgrid, sgrid = grids
    half = (
        TimeGrid(0.0, tgrid.T, max(1, tgrid.n_steps // 2)),
        SpatialGrid(sgrid.s_min, sgrid.s_max, (sgrid.n_space - 1) // 2 + 1),
    )

    def solve_r(r):
        return solve_dependent(cfg.deal, _with_r(cfg.market, r), grids, cfg.pde, hedge_mode=mode)

    def base():
        return solve_independent(cfg.deal, cfg.market.vol, grids, cfg.pde)

    def coarse():
        return solve_independent(cfg.deal, cfg.market.vol, half, cfg.pde)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        fut_base, fut_coarse = pool.submit(base), pool.submit(coarse)
        futs = [(r, pool.submit(solve_r, r)) for r in rs]
        ref = fut_base.result()
        grid_err = richardson_error(ref, fut_coarse.result())
        surfaces = []
        for r, fut in futs:
            try:
                surfaces.append(fut.result())
            except (ArithmeticError, RuntimeError, ValueError) as exc:
                return InvarianceReport(
                    r_values=rs, hedge_mode=mode, value_at_s0=(), independent_value_at_s0=math.nan,
                    per_r_max_abs_dev=(), max_abs_dev=math.nan, max_rel_dev=math.nan,
                    grid_error_estimate=grid_err, n_space=sgrid.n_space, n_time=tgrid.n_steps,
                    failed_r=r, error=f"{type(exc).__name__}: {exc}",
                )

    mask = interior_mask(sgrid.nodes)
    u_ref = ref.u[0, mask]
    scale = float(np.max(np.abs(u_ref)))
    devs = [float(np.max(np.abs(surf.u[0, mask] - u_ref))) for surf in surfaces]
    max_abs = max(devs)
    s0 = cfg.market.s0
    return InvarianceReport(
        r_values=rs,
        hedge_mode=mode,
        value_at_s0=tuple(surf.value_at(0.0, s0) for surf in surfaces),
        independent_value_at_s0=ref.value_at(0.0, s0),
        per_r_max_abs_dev=tuple(devs),
        max_abs_dev=max_abs,
        max_rel_dev=max_abs / scale if scale > 0.0 else (0.0 if max_abs == 0.0 else math.inf),
        grid_error_estimate=grid_err,
        n_space=sgrid.n_space,
        n_time=tgrid.n_steps,
    )


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    pde_value: float
    mc: McEstimate

    @property
    def z_score(self) -> float:
        diff = abs(self.pde_value - self.mc.value)
        if self.mc.std_error == 0.0:
            return 0.0 if diff <= 1e-12 * max(1.0, abs(self.pde_value)) else math.inf
        return diff / self.mc.std_error

    @property
    def passed(self) -> bool:
        return self.z_score <= 3.0

    CSV_HEADER = ("label", "pde_value", "mc_value", "std_error", "z_score", "n_paths", "seed")

    def csv_row(self) -> list[str]:
        return [
            self.label, f"{self.pde_value:.12g}", f"{self.mc.value:.12g}",
            f"{self.mc.std_error:.12g}", f"{self.z_score:.12g}",
            str(self.mc.n_paths), str(self.mc.seed),
        ]


def compare_pde_mc(
    cfg: ScenarioConfig,
    refine: int = 1,
    drifts: tuple[str, ...] = ("h", "r"),
    surface: ValueSurface | None = None,
) -> list[ComparisonRow]:
    """u(0, s0) from the h-drift PDE against the FBSDE estimate per drift."""
    if surface is None:
        surface = solve_independent(cfg.deal, cfg.market.vol, build_grids(cfg, refine), cfg.pde)
    pde_value = surface.value_at(0.0, cfg.market.s0)
    rows = []
    for drift in drifts:
        est = solve_backward(cfg.deal, cfg.market, drift, cfg.mc, hedge_mode=cfg.hedge_mode)
        rows.append(ComparisonRow(f"fbsde-{drift}", pde_value, est))
    return rows


@dataclass(frozen=True)
class LedgerStudy:
    dts: tuple[float, ...]
    reports: dict = field(repr=False)
    order: float

    def level_stats(self, dt: float) -> tuple[float, float, float]:
        reps = self.reports[dt]
        return (
            float(np.mean([r.mean_abs_residual for r in reps])),
            max(r.max_abs_residual for r in reps),
            float(np.mean([abs(r.total_residual) for r in reps])),
        )

    @property
    def finest(self) -> float:
        return min(self.dts)


def ledger_study(
    cfg: ScenarioConfig,
    surface: ValueSurface | None = None,
    refine: int = 1,
    metric: str = "mean",
) -> LedgerStudy:
    """Replay r-drift paths at each dt level, coarse levels subsampling the finest.

    Every level must divide the finest step count, so all levels share the
    same Brownian path.
    """
    levels = sorted(cfg.ledger.steps_per_year)
    finest = levels[-1]
    T = cfg.deal.maturity
    n_finest = round(finest * T)
    if any(finest % k for k in levels) or abs(n_finest - finest * T) > 1e-9:
        raise ConfigError(
            "ledger step levels must divide the finest level and fit the maturity",
            "ledger", "steps_per_year",
        )
    if surface is None:
        surface = solve_independent(cfg.deal, cfg.market.vol, build_grids(cfg, refine), cfg.pde)
    paths = simulate_paths(
        cfg.market, cfg.market.r, TimeGrid(0.0, T, n_finest), cfg.ledger.n_paths, cfg.ledger.seed
    )
    reports: dict[float, list[LedgerReport]] = {}
    for k in levels:
        stride = finest // k
        dt = 1.0 / k
        reports[dt] = replay_many(paths[:, ::stride], surface, cfg.deal, cfg.market, dt)
    order = convergence_order(reports, metric) if len(levels) >= 3 else math.nan
    return LedgerStudy(tuple(sorted(reports)), reports, order)


def _versions() -> dict:
    return {
        "nlval": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
    }


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


@dataclass(frozen=True)
class ScenarioResult:
    mode: str
    passed: bool
    files: tuple[str, ...]
    summary: dict


def run_scenario(cfg: ScenarioConfig, out_dir=None, refine: int = 1) -> ScenarioResult:
    """Run ``cfg.mode`` and write CSVs plus ``manifest.json`` into ``out_dir``."""
    if refine < 1:
        raise ConfigError("refine must be a positive integer")
    out = Path(out_dir if out_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    mode = cfg.mode
    summary: dict

    if mode == "value":
        surface = solve_independent(cfg.deal, cfg.market.vol, build_grids(cfg, refine), cfg.pde)
        u_path, z_path = out / "surface_u.csv", out / "surface_z.csv"
        surface.to_csv(u_path, z_path)
        value = surface.value_at(0.0, cfg.market.s0)
        _write_csv(out / "value.csv", ("s0", "value"), [[f"{cfg.market.s0:.12g}", f"{value:.12g}"]])
        files += [u_path, z_path, out / "value.csv"]
        passed = bool(np.isfinite(value))
        summary = {"value": value}
    elif mode == "invariance":
        rep = run_invariance_sweep(cfg, refine)
        _write_csv(out / "invariance.csv", InvarianceReport.CSV_HEADER, rep.csv_rows())
        files.append(out / "invariance.csv")
        summary = {"hedged": rep.summary()}
        passed = rep.passed
        if cfg.control_sweep:
            ctl = run_invariance_sweep(cfg, refine, cfg.control_sweep, hedge_mode="none")
            _write_csv(out / "invariance_control.csv", InvarianceReport.CSV_HEADER, ctl.csv_rows())
            files.append(out / "invariance_control.csv")
            summary["control"] = ctl.summary()
    elif mode == "mc_compare":
        rows = compare_pde_mc(cfg, refine)
        _write_csv(out / "mc_compare.csv", ComparisonRow.CSV_HEADER, [r.csv_row() for r in rows])
        _write_csv(out / "mc_estimates.csv", McEstimate.CSV_HEADER, [r.mc.csv_row() for r in rows])
        files += [out / "mc_compare.csv", out / "mc_estimates.csv"]
        passed = all(r.passed for r in rows)
        summary = {r.label: {"z_score": r.z_score, "passed": r.passed} for r in rows}
    elif mode == "ledger":
        study = ledger_study(cfg, refine=refine)
        rows = []
        for dt in study.dts:
            mean_abs, max_abs, total = study.level_stats(dt)
            rows.append([f"{dt:.12g}", f"{mean_abs:.12g}", f"{max_abs:.12g}", f"{total:.12g}"])
        _write_csv(out / "ledger_levels.csv", ("dt", "mean_abs_residual", "max_abs_residual",
                                               "mean_abs_total_residual"), rows)
        first = study.reports[study.finest][0]
        first.to_csv(out / "ledger_path0.csv")
        files += [out / "ledger_levels.csv", out / "ledger_path0.csv"]
        finest_mean = study.level_stats(study.finest)[0]
        threshold = 1e-4 * first.notional
        passed = bool(study.order >= 1.0 and finest_mean < threshold)
        summary = {"order": study.order, "finest_mean_abs_residual": finest_mean,
                   "threshold": threshold}
    elif mode == "representation":
        surface = solve_independent(cfg.deal, cfg.market.vol, build_grids(cfg, refine), cfg.pde)
        rep = representation_check(surface, cfg.deal, cfg.market, cfg.mc)
        _write_csv(
            out / "representation.csv",
            ("mean", "std_error", "pde_value", "residual", "z_score", "n_clipped"),
            [[f"{rep.mean:.12g}", f"{rep.std_error:.12g}", f"{rep.pde_value:.12g}",
              f"{rep.residual:.12g}", f"{rep.z_score:.12g}", str(rep.n_clipped)]],
        )
        files.append(out / "representation.csv")
        passed = rep.z_score <= 3.0
        summary = {"z_score": rep.z_score, "residual": rep.residual}
    else:
        raise ConfigError(f"unknown mode {mode!r}", "run", "mode")

    manifest = {
        "mode": mode,
        "config_sha256": cfg.sha256,
        "refine": refine,
        "seeds": {"mc": cfg.mc.seed, "ledger": cfg.ledger.seed},
        "versions": _versions(),
        "passed": bool(passed),
        "summary": summary,
        "files": {p.name: _sha256_file(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float))
    return ScenarioResult(mode, bool(passed), tuple(str(p) for p in files), summary)
