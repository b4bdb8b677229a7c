"""Turning trajectories into verdicts: a-priori bounds, decay rates, gaps.

The a-priori box check recomputes the per-species sup bounds from the
comparison arguments and tests the whole space-time range of a trajectory
against them.  Tumor-extinction experiments sweep the tumor growth rate,
fit the sup-norm decay on a log-linear window, and report the largest rate
still showing clean exponential decay.  The empirical threshold is reported,
never asserted as a theoretical constant.
"""

from __future__ import annotations

import concurrent.futures
import csv
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ConformanceError, InsufficientDataError
from .grid import Grid, SPECIES
from .kinetics import SpeciesBounds, comparison_bounds
from .pde import SteadyState, Trajectory, simulate

if TYPE_CHECKING:  # pragma: no cover
    from .scenario import Scenario


def mass(field_arr: np.ndarray, grid: Grid) -> float:
    """Midpoint-rule spatial integral: sum of cell value times cell volume."""
    arr = grid.check_field("field", field_arr)
    return float(arr.sum()) * grid.cell_volume


@dataclass(frozen=True)
class BoundsReport:
    """Space-time extrema per species against the a-priori box [0, C1]."""

    min_values: dict[str, float]
    max_values: dict[str, float]
    bounds: SpeciesBounds
    tol_clamp: float
    passed: dict[str, bool]

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        return {
            "min": self.min_values,
            "max": self.max_values,
            "c1": self.bounds.as_dict(),
            "tol_clamp": self.tol_clamp,
            "passed": self.passed,
            "all_passed": self.all_passed,
        }


def check_bounds(
    traj: Trajectory,
    params,
    tol_clamp: float = 1e-9,
) -> BoundsReport:
    """Evaluate the box condition over every recorded step of a trajectory.

    The per-species cap C1 comes from the comparison bounds seeded with the
    trajectory's own initial sups and source sup-norms; the minimum uses the
    pre-clamp values, so clamped excursions are not hidden.
    """
    if not traj.series_t:
        raise InsufficientDataError("empty trajectory")
    initial_sup = SpeciesBounds(*(traj.series_sup[k][0] for k in SPECIES))
    box = comparison_bounds(
        params,
        initial_sup,
        sup_s=traj.metadata.get("sup_s", 0.0),
        sup_v=traj.metadata.get("sup_v", 0.0),
        t_end=traj.series_t[-1],
    )
    min_values = {
        k: min(min(traj.series_min[k]), traj.pre_clamp_min[k]) for k in SPECIES
    }
    max_values = {k: max(traj.series_sup[k]) for k in SPECIES}
    caps = box.as_dict()
    passed = {
        k: (min_values[k] >= -tol_clamp)
        and (max_values[k] <= caps[k] * (1.0 + 1e-6))
        for k in SPECIES
    }
    return BoundsReport(min_values, max_values, box, tol_clamp, passed)


@dataclass(frozen=True)
class DecayFit:
    """Log-linear fit of a positive decaying series: sup ~ C * exp(-beta t)."""

    beta: float
    prefactor: float
    t_start: float
    t_end: float
    r_squared: float
    n_samples: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "prefactor": self.prefactor,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "r_squared": self.r_squared,
            "n_samples": self.n_samples,
            "degenerate": self.degenerate,
        }


def fit_decay(
    times: Sequence[float],
    sup_norms: Sequence[float],
    skip_fraction: float = 0.2,
    window: tuple[float, float] | None = None,
) -> DecayFit:
    """Least-squares line on (t, log sup); beta is the negated slope.

    The fit window defaults to the last 80% of the time range (the initial
    transient is excluded).  Nonpositive samples inside the window are
    dropped; if fewer than 10 usable samples remain the fit refuses.
    Constant series give beta = 0 with the degenerate flag set.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(sup_norms, dtype=float)
    if t.shape != y.shape or t.ndim != 1:
        raise ConformanceError("times and sup_norms must be 1D and equal length")
    if window is None:
        window = (t[0] + skip_fraction * (t[-1] - t[0]), t[-1])
    t_start, t_end = window
    keep = (t >= t_start) & (t <= t_end) & (y > 0.0)
    if int(keep.sum()) < 10:
        raise InsufficientDataError(
            f"only {int(keep.sum())} positive samples in window [{t_start:g}, {t_end:g}]"
        )
    tw, yw = t[keep], np.log(y[keep])
    n = tw.size
    t_mean, y_mean = tw.mean(), yw.mean()
    st2 = float(np.sum((tw - t_mean) ** 2))
    slope = float(np.sum((tw - t_mean) * (yw - y_mean))) / st2
    intercept = y_mean - slope * t_mean
    ss_tot = float(np.sum((yw - y_mean) ** 2))
    ss_res = float(np.sum((yw - (slope * tw + intercept)) ** 2))
    degenerate = ss_tot <= 1e-28 * max(1.0, y_mean * y_mean) * n
    r_squared = float("nan") if degenerate else 1.0 - ss_res / ss_tot
    return DecayFit(
        beta=0.0 if degenerate else -slope,
        prefactor=math.exp(intercept),
        t_start=float(tw[0]),
        t_end=float(tw[-1]),
        r_squared=r_squared,
        n_samples=n,
        degenerate=degenerate,
    )


@dataclass(frozen=True)
class ExtinctionRow:
    r2: float
    beta: float
    r_squared: float
    final_sup_t: float


@dataclass
class ExtinctionTable:
    """Sweep result over tumor growth rates, sorted ascending in r2.

    ``empirical_r0`` is the largest tested rate with positive fitted decay
    and a clean fit; ``monotone_beta`` flags (without failing) whether beta
    was nonincreasing across the sweep.
    """

    rows: list[ExtinctionRow] = field(default_factory=list)
    empirical_r0: float | None = None
    monotone_beta: bool = True

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r2", "beta", "r_squared", "final_supT"])
            for r in self.rows:
                w.writerow([f"{x:.17g}" for x in
                            (r.r2, r.beta, r.r_squared, r.final_sup_t)])

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"r2": r.r2, "beta": r.beta, "r_squared": r.r_squared,
                 "final_supT": r.final_sup_t}
                for r in self.rows
            ],
            "empirical_r0": self.empirical_r0,
            "monotone_beta": self.monotone_beta,
        }


def tumor_extinction_experiment(
    scenario: "Scenario",
    r2_values: Sequence[float],
    t_end: float | None = None,
    r_squared_gate: float = 0.99,
    max_workers: int | None = None,
) -> ExtinctionTable:
    """Sweep the tumor growth rate and fit the decay of sup-norm T per run.

    The base scenario must validate; the swept r2 may go down to 0 for
    degenerate comparisons (the override is deliberate and local to the
    sweep).  Runs are independent and may execute concurrently.
    """
    if t_end is None:
        t_end = scenario.horizon
    values = sorted(float(r) for r in r2_values)

    def one(r2: float) -> ExtinctionRow:
        problem = scenario.problem()
        # ModelParams construction does not validate, so r2 = 0 passes through
        # here without tripping the positivity rule of the base scenario.
        problem.params = scenario.params.with_(r2=r2)
        traj = simulate(problem, scenario.initial_state(), t_end,
                        snapshot_every=t_end, dt=scenario.solver.dt)
        fit = fit_decay(*traj.sup_series("T"))
        return ExtinctionRow(
            r2=r2,
            beta=fit.beta,
            r_squared=fit.r_squared,
            final_sup_t=traj.series_sup["T"][-1],
        )

    if max_workers and max_workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as ex:
            rows = list(ex.map(one, values))
    else:
        rows = [one(r) for r in values]

    table = ExtinctionTable(rows=rows)
    qualifying = [
        r.r2 for r in rows
        if r.beta > 0.0 and not math.isnan(r.r_squared) and r.r_squared > r_squared_gate
    ]
    table.empirical_r0 = max(qualifying) if qualifying else None
    betas = [r.beta for r in rows]
    table.monotone_beta = all(b1 >= b2 - 1e-12 for b1, b2 in zip(betas, betas[1:]))
    return table


@dataclass
class GapSeries:
    """Per-snapshot sup-norm distances to a steady state."""

    times: np.ndarray
    gaps: dict[str, np.ndarray]
    monotone_tail: dict[str, bool]

    @property
    def final(self) -> dict[str, float]:
        return {k: float(v[-1]) for k, v in self.gaps.items()}


def steady_state_gap(traj: Trajectory, steady: SteadyState) -> GapSeries:
    """sup |N - N*|, |I - I*|, |U - U*| per snapshot, with a tail-monotonicity flag.

    The flag is set per species when the last 25% of samples are
    nonincreasing (up to a 1e-12 relative slack).
    """
    for name, ref in (("N", steady.N), ("I", steady.I), ("U", steady.U)):
        if ref.shape != traj.grid.shape:
            raise ConformanceError(
                f"steady-state field {name} shape {ref.shape} != grid {traj.grid.shape}"
            )
    times = np.asarray(traj.snap_times)
    gaps = {
        name: np.array([
            float(np.max(np.abs(getattr(s, name) - getattr(steady, name))))
            for s in traj.snap_states
        ])
        for name in ("N", "I", "U")
    }
    monotone = {}
    for name, g in gaps.items():
        tail = g[-max(2, len(g) // 4):]
        slack = 1e-12 * max(1.0, float(tail.max(initial=0.0)))
        monotone[name] = bool(np.all(np.diff(tail) <= slack))
    return GapSeries(times=times, gaps=gaps, monotone_tail=monotone)
