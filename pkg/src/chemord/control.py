"""Optimal drug-dosage search: cost, floor constraints, penalty, gradients.

The control unknown is the injection field v(x,t), piecewise constant on a
space-time grid over the treatment horizon.  The cost is the terminal tumor
burden plus a quadratic dose regularization; normal- and immune-cell floor
constraints enter through a smooth one-sided quadratic hinge scaled by 1/eps,
driven to the sharp indicator by a continuation schedule.

Gradients follow discretize-then-differentiate: the adjoint recursion is the
exact transpose of the discrete forward linearization (symmetric diffusion
solves, explicit reaction Jacobians), so agreement with central finite
differences is a hard correctness test, not an approximation statement.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    ConformanceError,
    InvalidParameterError,
    LineSearchStallError,
    ScenarioValidationError,
    ValidationIssue,
)
from .grid import DiffusionCoeffs, Grid, SourceFields, State, FieldLike
from .kinetics import ModelParams, reaction_jacobian, smooth_heaviside
from .pde import Problem, StepInfo, step


@dataclass
class ControlSchedule:
    """Drug injection values on the space-time control grid.

    ``values`` has shape (n_steps, *grid.shape); entry k applies on the
    k-th time interval of the horizon.  Box-admissible: 0 <= v <= v_max.
    """

    values: np.ndarray
    t0: float
    grid: Grid
    v_max: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 + self.grid.dim or self.values.shape[1:] != self.grid.shape:
            raise ConformanceError(
                f"control values shape {self.values.shape} does not match "
                f"(n_steps, {self.grid.shape})"
            )
        if not (self.t0 > 0.0 and self.v_max > 0.0):
            raise InvalidParameterError("t0 and v_max must be > 0")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def dt(self) -> float:
        return self.t0 / self.n_steps

    def issues(self) -> list[ValidationIssue]:
        out = []
        if not np.all(np.isfinite(self.values)):
            out.append(ValidationIssue("control", "v", "non-finite entries"))
        if np.any(self.values < 0.0):
            out.append(ValidationIssue("control", "v", "negative entries"))
        if np.any(self.values > self.v_max):
            out.append(ValidationIssue("control", "v", f"entries exceed v_max={self.v_max:g}"))
        return out

    def validated(self) -> "ControlSchedule":
        bad = self.issues()
        if bad:
            raise ScenarioValidationError(bad)
        return self

    def like(self, values: np.ndarray) -> "ControlSchedule":
        return ControlSchedule(values, self.t0, self.grid, self.v_max)

    def to_csv(self, path) -> None:
        """One row per (interval, cell): t_start, coordinates, v."""
        import csv as _csv

        coords = self.grid.coordinate_columns()
        headers = ["t"] + ["x", "y"][: self.grid.dim] + ["v"]
        with open(path, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(headers)
            for k in range(self.n_steps):
                flat = self.values[k].ravel()
                for j in range(flat.size):
                    row = [k * self.dt] + [c[j] for c in coords] + [flat[j]]
                    w.writerow([f"{x:.17g}" for x in row])


@dataclass(frozen=True)
class ConstraintSpec:
    """Floor constraints on time-integrated normal and immune cell levels.

    ``constraint_form`` selects the integral compared against the floor:
    "time-averaged-mass" uses (1/t0) * iint u dx dt, "squared" the literal
    iint u^2 dx dt.  Floors are baselines minus slacks and must stay positive.
    """

    A0: float
    B0: float
    slack_N: float
    slack_I: float
    constraint_form: str = "time-averaged-mass"

    def __post_init__(self):
        if self.constraint_form not in ("time-averaged-mass", "squared"):
            raise InvalidParameterError(
                f"unknown constraint_form {self.constraint_form!r}"
            )
        if not (0.0 < self.slack_N < self.A0):
            raise InvalidParameterError(
                f"need 0 < slack_N < A0, got slack_N={self.slack_N!r}, A0={self.A0!r}"
            )
        if not (0.0 < self.slack_I < self.B0):
            raise InvalidParameterError(
                f"need 0 < slack_I < B0, got slack_I={self.slack_I!r}, B0={self.B0!r}"
            )

    @property
    def floor_N(self) -> float:
        return self.A0 - self.slack_N

    @property
    def floor_I(self) -> float:
        return self.B0 - self.slack_I

    @classmethod
    def from_initial(cls, initial: State, grid: Grid, slack_frac_N: float,
                     slack_frac_I: float, constraint_form: str = "time-averaged-mass"):
        a0 = float(initial.N.sum()) * grid.cell_volume
        b0 = float(initial.I.sum()) * grid.cell_volume
        return cls(A0=a0, B0=b0, slack_N=slack_frac_N * a0,
                   slack_I=slack_frac_I * b0, constraint_form=constraint_form)


@dataclass(frozen=True)
class CostReport:
    """Cost decomposition for one forward run."""

    terminal: float
    regularization: float
    penalty_value: float
    margins: dict[str, float]
    achieved: dict[str, float]

    @property
    def total(self) -> float:
        return self.terminal + self.regularization + self.penalty_value

    def to_dict(self) -> dict:
        return {
            "terminal": self.terminal,
            "regularization": self.regularization,
            "penalty": self.penalty_value,
            "total": self.total,
            "margins": self.margins,
            "achieved": self.achieved,
        }


def penalty(margins: Sequence[float], floors: Sequence[float], eps: float) -> float:
    """Smooth one-sided quadratic hinge, floor-normalized, summed over constraints.

    A margin m = achieved - floor contributes 0 when m >= 0 and
    ``(m/floor)^2 / (2 eps)`` when m < 0; the hinge is C1 at m = 0 and
    approaches the sharp indicator as eps -> 0 on the infeasible side.
    """
    if not eps > 0.0:
        raise InvalidParameterError(f"eps must be > 0, got {eps!r}")
    total = 0.0
    for m, f in zip(margins, floors):
        if m < 0.0:
            norm = abs(f) if f != 0.0 else 1.0
            total += (m / norm) ** 2 / (2.0 * eps)
    return total


def _penalty_dmargin(margins: Sequence[float], floors: Sequence[float],
                     eps: float) -> list[float]:
    out = []
    for m, f in zip(margins, floors):
        if m < 0.0:
            norm = abs(f) if f != 0.0 else 1.0
            out.append(m / (norm * norm * eps))
        else:
            out.append(0.0)
    return out


@dataclass
class ControlProblem:
    """The fixed data of one dosage-optimization instance.

    ``n_sub`` inner solver substeps per control interval keep the forward
    integration inside its stability cap while the control stays coarse.
    """

    grid: Grid
    params: ModelParams
    diffusion: DiffusionCoeffs
    s: FieldLike
    initial: State
    constraints: ConstraintSpec
    lam: float
    t0: float
    n_steps: int
    n_sub: int = 1
    cg_tol: float = 1e-10

    def __post_init__(self):
        if not self.lam > 0.0:
            raise InvalidParameterError(f"lambda must be > 0, got {self.lam!r}")
        if self.n_steps < 1 or self.n_sub < 1:
            raise InvalidParameterError("n_steps and n_sub must be >= 1")

    @property
    def dt_ctrl(self) -> float:
        return self.t0 / self.n_steps

    @property
    def dt_sub(self) -> float:
        return self.dt_ctrl / self.n_sub

    @property
    def n_substeps(self) -> int:
        return self.n_steps * self.n_sub

    def zero_schedule(self, v_max: float) -> ControlSchedule:
        return ControlSchedule(
            np.zeros((self.n_steps,) + self.grid.shape), self.t0, self.grid, v_max
        )


@dataclass
class _ForwardRecord:
    states: list[np.ndarray]          # stacked (4, *shape) per substep, length K+1
    report: CostReport
    clamp_total: float


def _make_problem(cp: ControlProblem, v: ControlSchedule) -> Problem:
    values = v.values
    dt_ctrl = cp.dt_ctrl
    n_last = cp.n_steps - 1

    def v_of_t(t: float) -> np.ndarray:
        return values[min(n_last, int(math.floor(t / dt_ctrl + 1e-9)))]

    return Problem(
        grid=cp.grid, params=cp.params, diffusion=cp.diffusion,
        sources=SourceFields(s=cp.s, v=v_of_t), cg_tol=cp.cg_tol,
    )


def _forward(cp: ControlProblem, v: ControlSchedule, eps: float | None,
             keep_states: bool) -> _ForwardRecord:
    """Run the sub-stepped forward model and assemble the cost report."""
    problem = _make_problem(cp, v)
    grid, spec = cp.grid, cp.constraints
    vol = grid.cell_volume
    dt_sub = cp.dt_sub
    squared = spec.constraint_form == "squared"

    state = cp.initial.copy()
    states = [state.stack()] if keep_states else []
    q_n = 0.0
    q_i = 0.0
    clamp_total = 0.0
    for kk in range(cp.n_substeps):
        t = kk * dt_sub
        state, info = step(state, t, dt_sub, problem)
        clamp_total += info.clamp
        if keep_states:
            states.append(state.stack())
        if squared:
            q_n += float(np.sum(state.N * state.N)) * vol * dt_sub
            q_i += float(np.sum(state.I * state.I)) * vol * dt_sub
        else:
            q_n += float(state.N.sum()) * vol * dt_sub
            q_i += float(state.I.sum()) * vol * dt_sub

    if not squared:
        q_n /= cp.t0
        q_i /= cp.t0
    margins = {"N": q_n - spec.floor_N, "I": q_i - spec.floor_I}
    achieved = {"N": q_n, "I": q_i}
    terminal = float(np.sum(state.T * state.T)) * vol
    reg = 0.5 * cp.lam * float(np.sum(v.values * v.values)) * vol * cp.dt_ctrl
    pen = 0.0
    if eps is not None:
        pen = penalty([margins["N"], margins["I"]],
                      [spec.floor_N, spec.floor_I], eps)
    report = CostReport(terminal=terminal, regularization=reg,
                        penalty_value=pen, margins=margins, achieved=achieved)
    return _ForwardRecord(states=states, report=report, clamp_total=clamp_total)


def cost(v: ControlSchedule, lam: float, cp: ControlProblem) -> CostReport:
    """Terminal tumor burden + dose regularization, with constraint margins."""
    cp = _with_lambda(cp, lam)
    return _forward(cp, v.validated(), eps=None, keep_states=False).report


def penalized_cost(v: ControlSchedule, lam: float, eps: float,
                   cp: ControlProblem) -> CostReport:
    """cost() plus the hinge penalty, from one shared simulation."""
    cp = _with_lambda(cp, lam)
    return _forward(cp, v.validated(), eps=eps, keep_states=False).report


def _with_lambda(cp: ControlProblem, lam: float) -> ControlProblem:
    if lam == cp.lam:
        return cp
    import dataclasses

    return dataclasses.replace(cp, lam=lam)


def gradient_fd(v: ControlSchedule, lam: float, eps: float, cp: ControlProblem,
                h: float = 1e-6) -> np.ndarray:
    """Central finite differences of the penalized cost, one cell at a time.

    Runs two simulations per control cell; intended as the brute-force
    oracle on small grids.
    """
    if not h > 0.0:
        raise InvalidParameterError(f"h must be > 0, got {h!r}")
    cp = _with_lambda(cp, lam)
    base = v.values
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        pert = base.copy()
        pert[idx] = base[idx] + h
        j_plus = _forward(cp, v.like(pert), eps, keep_states=False).report.total
        pert[idx] = base[idx] - h
        j_minus = _forward(cp, v.like(pert), eps, keep_states=False).report.total
        grad[idx] = (j_plus - j_minus) / (2.0 * h)
        it.iternext()
    return grad


def _adjoint_gradient(cp: ControlProblem, v: ControlSchedule, eps: float,
                      record: _ForwardRecord) -> np.ndarray:
    """Exact transpose of the discrete forward linearization."""
    from .pde import cg_solve, div_d_grad

    grid, params, spec = cp.grid, cp.params, cp.constraints
    vol = grid.cell_volume
    dt = cp.dt_sub
    squared = spec.constraint_form == "squared"
    rep = record.report
    p_n, p_i = _penalty_dmargin(
        [rep.margins["N"], rep.margins["I"]],
        [spec.floor_N, spec.floor_I], eps,
    )
    k_total = cp.n_substeps

    def direct_term(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # d(penalty)/d(N_k), d(penalty)/d(I_k) for a right-endpoint state
        if squared:
            wn = p_n * 2.0 * stack[0] * vol * dt
            wi = p_i * 2.0 * stack[2] * vol * dt
        else:
            wn = np.full(grid.shape, p_n * vol * dt / cp.t0)
            wi = np.full(grid.shape, p_i * vol * dt / cp.t0)
        return wn, wi

    final = record.states[k_total]
    lam_adj = np.zeros((4,) + grid.shape)
    lam_adj[1] = 2.0 * final[1] * vol
    wn, wi = direct_term(final)
    lam_adj[0] += wn
    lam_adj[2] += wi

    grad = cp.lam * v.values * vol * cp.dt_ctrl
    for kk in range(k_total - 1, -1, -1):
        t = kk * dt
        u = record.states[kk]
        d_now = cp.diffusion.at(t)
        mu = np.empty_like(lam_adj)
        for i in range(4):
            d = d_now[i]
            mu[i], _ = cg_solve(
                lambda w: w - dt * div_d_grad(w, d, grid),
                lam_adj[i], x0=lam_adj[i], tol=cp.cg_tol,
            )

        v_now = v.values[kk // cp.n_sub]
        jac = reaction_jacobian(tuple(u), params, v_val=v_now)
        new = np.empty_like(lam_adj)
        new[0] = mu[0] + dt * (
            jac[("dN", "N")] * mu[0] + jac[("dT", "N")] * mu[1]
            + jac[("dU", "N")] * mu[3]
        )
        new[1] = mu[1] + dt * (
            jac[("dN", "T")] * mu[0] + jac[("dT", "T")] * mu[1]
            + jac[("dI", "T")] * mu[2]
        )
        new[2] = mu[2] + dt * (
            jac[("dT", "I")] * mu[1] + jac[("dI", "I")] * mu[2]
        )
        new[3] = mu[3] + dt * (
            jac[("dN", "U")] * mu[0] + jac[("dT", "U")] * mu[1]
            + jac[("dI", "U")] * mu[2] + jac[("dU", "U")] * mu[3]
        )
        grad[kk // cp.n_sub] += dt * smooth_heaviside(
            u[0] - params.n_min, params.h_delta
        ) * mu[3]

        if kk >= 1:
            wn, wi = direct_term(u)
            new[0] += wn
            new[2] += wi
        lam_adj = new
    return grad


def gradient_adjoint(v: ControlSchedule, lam: float, eps: float,
                     cp: ControlProblem) -> np.ndarray:
    """Gradient of the penalized cost via one forward and one backward sweep."""
    cp = _with_lambda(cp, lam)
    record = _forward(cp, v.validated(), eps, keep_states=True)
    return _adjoint_gradient(cp, v, eps, record)


@dataclass
class IterateRecord:
    iteration: int
    eps: float
    report: CostReport
    grad_norm: float
    step_size: float

    def to_dict(self) -> dict:
        d = {"iteration": self.iteration, "eps": self.eps,
             "grad_norm": self.grad_norm, "step_size": self.step_size}
        d.update(self.report.to_dict())
        return d


@dataclass
class OptimizeResult:
    schedule: ControlSchedule
    history: list[IterateRecord]
    status: str                  # "converged" | "max_iters"
    iterations: int
    eps_final: float
    grad_norm: float

    def write_history_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.history:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def _save_checkpoint(path, v: np.ndarray, eps_index: int, iteration: int) -> None:
    np.savez(path, v=v, eps_index=np.asarray(eps_index),
             iteration=np.asarray(iteration))


def load_checkpoint(path) -> tuple[np.ndarray, int, int]:
    data = np.load(path, allow_pickle=False)
    return data["v"], int(data["eps_index"]), int(data["iteration"])


def optimize(
    initial_v: ControlSchedule,
    lam: float,
    eps_schedule: Sequence[float],
    cp: ControlProblem,
    max_iters: int = 500,
    tol_grad: float = 1e-6,
    armijo: float = 1e-4,
    min_step: float = 1e-14,
    checkpoint_path=None,
    resume: bool = False,
) -> OptimizeResult:
    """Projected gradient descent with backtracking and eps continuation.

    Projection is a componentwise clamp to [0, v_max].  The trial step uses
    a safeguarded Barzilai-Borwein length, halved until the Armijo
    sufficient-decrease test passes; accepted iterates are recorded, so the
    penalized cost within each eps stage is nonincreasing by construction.
    Once the projected-gradient norm drops under ``tol_grad`` the penalty
    sharpens to the next eps; convergence at the final eps ends the run.
    """
    if not eps_schedule:
        raise InvalidParameterError("eps_schedule must be nonempty")
    eps_schedule = list(eps_schedule)
    cp = _with_lambda(cp, lam)
    v_max = initial_v.v_max
    v = np.clip(initial_v.values.copy(), 0.0, v_max)
    eps_start, it_start = 0, 0
    if resume and checkpoint_path is not None:
        v, eps_start, it_start = load_checkpoint(checkpoint_path)
        v = np.clip(np.asarray(v, dtype=float), 0.0, v_max)

    history: list[IterateRecord] = []
    iteration = it_start
    alpha_prev = 1.0
    status = "max_iters"
    grad_norm = math.inf
    eps = eps_schedule[-1]

    for stage, eps in enumerate(eps_schedule):
        if stage < eps_start:
            continue
        sched = initial_v.like(v)
        record = _forward(cp, sched, eps, keep_states=True)
        g = _adjoint_gradient(cp, sched, eps, record)
        j_curr = record.report.total
        s_prev = y_prev = None
        while True:
            pg = v - np.clip(v - g, 0.0, v_max)
            grad_norm = math.sqrt(float(np.sum(pg * pg)))
            if grad_norm < tol_grad:
                status = "converged"
                break
            if iteration >= max_iters:
                status = "max_iters"
                break

            if s_prev is not None and float(np.sum(s_prev * y_prev)) > 0.0:
                alpha = float(np.sum(s_prev * s_prev) / np.sum(s_prev * y_prev))
                alpha = min(max(alpha, 1e-10), 1e10)
            else:
                alpha = alpha_prev * 2.0
            accepted = False
            while alpha >= min_step:
                v_trial = np.clip(v - alpha * g, 0.0, v_max)
                trial_sched = initial_v.like(v_trial)
                trial_rec = _forward(cp, trial_sched, eps, keep_states=True)
                decrease = float(np.sum(g * (v - v_trial)))
                if trial_rec.report.total <= j_curr - armijo * decrease:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                raise LineSearchStallError(
                    f"no decrease at minimum step (eps={eps:g}, iter={iteration})",
                    last_iterate=initial_v.like(v), history=history,
                )

            g_new = _adjoint_gradient(cp, trial_sched, eps, trial_rec)
            s_prev = v_trial - v
            y_prev = g_new - g
            v, g, j_curr = v_trial, g_new, trial_rec.report.total
            alpha_prev = alpha
            iteration += 1
            history.append(IterateRecord(
                iteration=iteration, eps=eps, report=trial_rec.report,
                grad_norm=grad_norm, step_size=alpha,
            ))
            if checkpoint_path is not None:
                _save_checkpoint(checkpoint_path, v, stage, iteration)
        if status == "max_iters" and iteration >= max_iters:
            break

    return OptimizeResult(
        schedule=initial_v.like(v),
        history=history,
        status=status,
        iterations=iteration,
        eps_final=eps,
        grad_norm=grad_norm,
    )
