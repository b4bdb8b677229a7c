"""Spatially homogeneous four-species model, integrated by fixed-step RK4.

This engine doubles as the independent oracle for the PDE solver on
spatially uniform scenarios.  The drug equation defaults to the plain
linear form ``dU/dt = v(t) - k2*U``; the gated form used by the spatial
solver can be switched on with ``drug_cutoff=True`` so homogeneous-reduction
comparisons run identical kinetics on both sides.

The step size is fixed (no adaptivity) so oracle comparisons are exactly
reproducible.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, InvalidParameterError
from .kinetics import ModelParams, reaction_rates

SourceOfT = Callable[[float], float] | float | None


@dataclass(frozen=True)
class OdeState:
    """Scalar concentrations at one time."""

    N: float
    T: float
    I: float
    U: float
    t: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.N, self.T, self.I, self.U], dtype=float)


@dataclass
class OdeTrajectory:
    """Fixed-step trajectory plus the nonnegativity-clamp diagnostic.

    ``clamps[k]`` is the largest magnitude clipped to zero in step k; all
    zeros on a well-resolved run.
    """

    states: list[OdeState] = field(default_factory=list)
    clamps: list[float] = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def component(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.states])

    @property
    def max_clamp(self) -> float:
        return max(self.clamps, default=0.0)

    def to_csv(self, path) -> None:
        """Write columns t,N,T,I,U."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "N", "T", "I", "U"])
            for s in self.states:
                w.writerow([f"{x:.17g}" for x in (s.t, s.N, s.T, s.I, s.U)])


def _source_value(src: SourceOfT, t: float) -> float:
    if src is None:
        return 0.0
    if callable(src):
        return float(src(t))
    return float(src)


def ode_rhs(
    y: np.ndarray,
    t: float,
    params: ModelParams,
    s_of_t: SourceOfT = None,
    v_of_t: SourceOfT = None,
    drug_cutoff: bool = False,
) -> np.ndarray:
    """Right-hand side at state vector y = (N, T, I, U)."""
    s_val = _source_value(s_of_t, t)
    v_val = _source_value(v_of_t, t)
    dN, dT, dI, dU = reaction_rates(tuple(y), params, s_val, v_val)
    if not drug_cutoff:
        dU = v_val - params.k2 * y[3]
    return np.array([dN, dT, dI, dU], dtype=float)


def ode_step(
    state: OdeState,
    dt: float,
    params: ModelParams,
    s_of_t: SourceOfT = None,
    v_of_t: SourceOfT = None,
    drug_cutoff: bool = False,
) -> tuple[OdeState, float]:
    """One classical RK4 step.

    Returns the new state and the clamp magnitude: any component driven
    negative by discretization error is clipped to zero and the largest
    clipped magnitude reported (0.0 when nothing fired).
    """
    if not dt > 0.0:
        raise InvalidParameterError(f"dt must be > 0, got {dt!r}")
    y = state.as_array()
    t = state.t

    def f(yy, tt):
        return ode_rhs(yy, tt, params, s_of_t, v_of_t, drug_cutoff)

    k1 = f(y, t)
    k2 = f(y + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = f(y + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = f(y + dt * k3, t + dt)
    y_new = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    clamp = float(max(0.0, -y_new.min()))
    y_new = np.maximum(y_new, 0.0)
    return OdeState(*y_new, t=t + dt), clamp


def ode_integrate(
    initial: OdeState,
    t_end: float,
    dt: float,
    params: ModelParams,
    s_of_t: SourceOfT = None,
    v_of_t: SourceOfT = None,
    drug_cutoff: bool = False,
) -> OdeTrajectory:
    """Fixed-step trajectory from ``initial.t`` to exactly ``t_end``.

    Samples every step; a shorter final step lands on ``t_end`` exactly.
    Raises :class:`DivergenceError` if any component goes non-finite.
    """
    if not t_end > initial.t:
        raise InvalidParameterError(f"t_end must exceed start time {initial.t!r}")
    if not dt > 0.0:
        raise InvalidParameterError(f"dt must be > 0, got {dt!r}")
    traj = OdeTrajectory(states=[initial])
    state = initial
    remaining = t_end - initial.t
    n_full = int(math.floor(remaining / dt + 1e-12))
    for k in range(n_full):
        state, clamp = ode_step(state, dt, params, s_of_t, v_of_t, drug_cutoff)
        _check_finite(state)
        traj.states.append(state)
        traj.clamps.append(clamp)
    if state.t < t_end - 1e-12 * max(1.0, abs(t_end)):
        state, clamp = ode_step(
            state, t_end - state.t, params, s_of_t, v_of_t, drug_cutoff
        )
        _check_finite(state)
        traj.states.append(state)
        traj.clamps.append(clamp)
    return traj


def _check_finite(state: OdeState) -> None:
    for name in ("N", "T", "I", "U"):
        if not math.isfinite(getattr(state, name)):
            raise DivergenceError(name, state.t, cell=0)
