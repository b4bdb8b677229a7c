"""Model parameters and pointwise reaction kinetics for the four-species system.

The state is (N, T, I, U): normal cells, tumor cells, immune cells and drug
concentration.  The kinetics combine logistic growth, cell-cell competition,
tumor-stimulated immune recruitment with half-saturation, a saturating
fractional-kill term ``a*(1 - exp(-U))`` per cell species, and a drug source
gated by a smoothed cutoff that shuts injection off when the normal-cell
concentration drops below a clinical floor.

All functions broadcast over numpy arrays, so the same code evaluates a
single point or a whole grid field.  Everything here is pure: identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Callable, Union

import numpy as np

from .errors import DomainError, InvalidParameterError, ValidationIssue

# Validation rule codes carried by ValidationIssue (see README).
RULE_DIFFUSION = "H(2.1)"  # diffusion coefficients inside configured bounds
RULE_SOURCES = "H(2.2)"    # source fields nonnegative with finite sup
RULE_INITIAL = "H(2.3)"    # initial data nonnegative, bounded
RULE_PARAMS = "H(2.4)"     # all rate constants strictly positive

FieldLike = Union[float, np.ndarray, Callable[[float], np.ndarray]]


@dataclass(frozen=True)
class ModelParams:
    """Rate constants of the kinetics.  All entries must be strictly positive.

    ``b1`` is the inverse carrying capacity paired with the normal cells and
    ``b2`` with the tumor cells (the convention used consistently by every
    solver in this package).  ``n_min`` is the normal-cell level below which
    drug injection stops; ``h_delta`` the width of the smooth cutoff ramp.
    """

    r1: float   # normal growth rate (1/time)
    r2: float   # tumor growth rate (1/time)
    b1: float   # inverse carrying capacity of N (1/conc)
    b2: float   # inverse carrying capacity of T (1/conc)
    c1: float   # immune loss to tumor contact (1/(conc time))
    c2: float   # tumor kill by immune cells (1/(conc time))
    c3: float   # tumor loss to normal-cell competition (1/(conc time))
    c4: float   # normal loss to tumor competition (1/(conc time))
    a1: float   # drug kill coefficient on immune cells (1/time)
    a2: float   # drug kill coefficient on tumor cells (1/time)
    a3: float   # drug kill coefficient on normal cells (1/time)
    k1: float   # immune death rate (1/time)
    k2: float   # drug decay rate (1/time)
    rho: float  # immune recruitment amplitude (1/time)
    alpha: float  # recruitment half-saturation (conc)
    n_min: float  # drug-stop threshold on N (conc)
    h_delta: float  # cutoff ramp width (conc)

    def issues(self) -> list[ValidationIssue]:
        """Every non-positive entry, tagged with the parameter name."""
        out = []
        for f in fields(self):
            value = getattr(self, f.name)
            if not (isinstance(value, (int, float)) and math.isfinite(value)):
                out.append(ValidationIssue(RULE_PARAMS, f.name, f"not finite: {value!r}"))
            elif value <= 0.0:
                out.append(ValidationIssue(RULE_PARAMS, f.name, f"must be > 0, got {value!r}"))
        return out

    def validated(self) -> "ModelParams":
        from .errors import ScenarioValidationError

        bad = self.issues()
        if bad:
            raise ScenarioValidationError(bad)
        return self

    def with_(self, **changes) -> "ModelParams":
        """Copy with selected fields replaced (used by parameter sweeps)."""
        return replace(self, **changes)


@dataclass(frozen=True)
class SpeciesBounds:
    """Per-species a-priori sup bounds; the box each trajectory must stay in."""

    N: float
    T: float
    I: float
    U: float

    def as_dict(self) -> dict[str, float]:
        return {"N": self.N, "T": self.T, "I": self.I, "U": self.U}

    @property
    def max(self) -> float:
        return max(self.N, self.T, self.I, self.U)


def smooth_heaviside(y, h_delta: float):
    """Smoothed unit step: 0 for y <= 0, 1 for y >= h_delta, cubic ramp between.

    The ramp is the cubic smoothstep ``3u^2 - 2u^3`` with ``u = y/h_delta``,
    which joins both flats with continuous first derivative and is monotone
    nondecreasing.
    """
    if not (isinstance(h_delta, (int, float)) and h_delta > 0.0):
        raise InvalidParameterError(f"h_delta must be > 0, got {h_delta!r}")
    u = np.clip(np.asarray(y, dtype=float) / h_delta, 0.0, 1.0)
    out = u * u * (3.0 - 2.0 * u)
    if np.isscalar(y) or np.ndim(y) == 0:
        return float(out)
    return out


def smooth_heaviside_deriv(y, h_delta: float):
    """Derivative of :func:`smooth_heaviside`; zero outside (0, h_delta)."""
    if not (isinstance(h_delta, (int, float)) and h_delta > 0.0):
        raise InvalidParameterError(f"h_delta must be > 0, got {h_delta!r}")
    ya = np.asarray(y, dtype=float)
    u = ya / h_delta
    inside = (u > 0.0) & (u < 1.0)
    out = np.where(inside, 6.0 * u * (1.0 - u) / h_delta, 0.0)
    if np.isscalar(y) or np.ndim(y) == 0:
        return float(out)
    return out


def kill_fraction(U):
    """Saturating drug-kill fraction ``1 - exp(-U)``; in [0, 1) for U >= 0."""
    ua = np.asarray(U, dtype=float)
    if np.any(ua < 0.0):
        raise DomainError("kill_fraction requires U >= 0 (states are nonnegative)")
    out = -np.expm1(-ua)
    if np.isscalar(U) or np.ndim(U) == 0:
        return float(out)
    return out


def reaction_rates(state_pt, params: ModelParams, s_val=0.0, v_val=0.0):
    """Pointwise kinetics (dN, dT, dI, dU) of the four-species model.

    ``state_pt`` is the tuple (N, T, I, U) of scalars or conforming arrays;
    ``s_val`` and ``v_val`` are the immune and drug injection rates at the
    same points.  The drug source is gated by the smooth cutoff on
    ``N - n_min``.
    """
    N, T, I, U = state_pt
    p = params
    kill = kill_fraction(U)
    dN = p.r1 * N * (1.0 - p.b1 * N) - p.c4 * T * N - p.a3 * kill * N
    dT = p.r2 * T * (1.0 - p.b2 * T) - p.c2 * I * T - p.c3 * T * N - p.a2 * kill * T
    dI = s_val + p.rho * I * T / (p.alpha + T) - p.c1 * I * T - p.k1 * I - p.a1 * kill * I
    dU = v_val * smooth_heaviside(N - p.n_min, p.h_delta) - p.k2 * U
    return dN, dT, dI, dU


def reaction_jacobian(state_pt, params: ModelParams, v_val=0.0):
    """Pointwise Jacobian of the kinetics with respect to (N, T, I, U).

    Returns a dict keyed by ('dX', 'Y') for the nonzero partials; entries
    broadcast like the state.  Used by the discrete adjoint and by the
    Lipschitz bound in the step-size heuristic.
    """
    N, T, I, U = state_pt
    p = params
    kill = kill_fraction(U)
    expU = np.exp(-np.asarray(U, dtype=float))
    sat = p.alpha + T
    return {
        ("dN", "N"): p.r1 * (1.0 - 2.0 * p.b1 * N) - p.c4 * T - p.a3 * kill,
        ("dN", "T"): -p.c4 * N,
        ("dN", "U"): -p.a3 * expU * N,
        ("dT", "N"): -p.c3 * T,
        ("dT", "T"): p.r2 * (1.0 - 2.0 * p.b2 * T) - p.c2 * I - p.c3 * N - p.a2 * kill,
        ("dT", "I"): -p.c2 * T,
        ("dT", "U"): -p.a2 * expU * T,
        ("dI", "T"): p.rho * I * p.alpha / (sat * sat) - p.c1 * I,
        ("dI", "I"): p.rho * T / sat - p.c1 * T - p.k1 - p.a1 * kill,
        ("dI", "U"): -p.a1 * expU * I,
        ("dU", "N"): v_val * smooth_heaviside_deriv(N - p.n_min, p.h_delta),
        ("dU", "U"): -p.k2 + np.zeros_like(np.asarray(U, dtype=float)),
    }


def comparison_bounds(
    params: ModelParams,
    initial_sup: SpeciesBounds,
    sup_s: float,
    sup_v: float,
    t_end: float,
) -> SpeciesBounds:
    """A-priori sup bounds per species from comparison/Gronwall arguments.

    N and T are dominated by their logistic supersolutions, U by the balance
    of bounded injection against linear decay.  The immune bound uses the
    worst-case recruitment rate over the tumor box: with
    ``g = rho*T_max/(alpha+T_max) - k1`` one has
    ``dI/dt <= sup_s + g*I``, integrated in closed form over [0, t_end].
    """
    p = params
    bN = max(initial_sup.N, 1.0 / p.b1)
    bT = max(initial_sup.T, 1.0 / p.b2)
    bU = max(initial_sup.U, sup_v / p.k2)
    g = p.rho * bT / (p.alpha + bT) - p.k1
    I0 = initial_sup.I
    if g > 0.0:
        bI = I0 * math.exp(g * t_end) + (sup_s / g) * (math.exp(g * t_end) - 1.0)
    elif g == 0.0:
        bI = I0 + sup_s * t_end
    else:
        bI = max(I0, sup_s / (-g))
    return SpeciesBounds(N=bN, T=bT, I=bI, U=bU)


def lipschitz_bound(params: ModelParams, box: SpeciesBounds, sup_v: float) -> float:
    """Conservative Lipschitz constant of the kinetics over [0, box]^4.

    Max row sum of interval bounds on the Jacobian entries; suprema of each
    partial are taken over the per-species boxes.
    """
    p = params
    cN, cT, cI = box.N, box.T, box.I
    row_n = (
        p.r1 * max(1.0, abs(1.0 - 2.0 * p.b1 * cN)) + p.c4 * cT + p.a3
        + p.c4 * cN + p.a3 * cN
    )
    row_t = (
        p.r2 * max(1.0, abs(1.0 - 2.0 * p.b2 * cT)) + p.c2 * cI + p.c3 * cN + p.a2
        + p.c3 * cT + p.c2 * cT + p.a2 * cT
    )
    row_i = (
        cI * (p.rho / p.alpha + p.c1)
        + p.rho + p.c1 * cT + p.k1 + p.a1
        + p.a1 * cI
    )
    row_u = sup_v * 1.5 / p.h_delta + p.k2
    return max(row_n, row_t, row_i, row_u)
