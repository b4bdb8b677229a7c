"""Exception hierarchy shared across the package.

Everything user-facing derives from :class:`ChemordError` so callers can
catch one base class.  Validation problems are collected into
:class:`ScenarioValidationError` rather than raised one at a time.
"""

from __future__ import annotations

from dataclasses import dataclass


class ChemordError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(ChemordError, ValueError):
    """A scalar argument is outside its admissible range."""


class DomainError(ChemordError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ConformanceError(ChemordError, ValueError):
    """A field does not conform to the grid (or to another field)."""


class DivergenceError(ChemordError, RuntimeError):
    """A simulated field became non-finite.

    Attributes carry enough context to locate the blow-up.
    """

    def __init__(self, species: str, time: float, cell: int):
        self.species = species
        self.time = time
        self.cell = cell
        super().__init__(
            f"non-finite value in species {species!r} at t={time:.6g}, cell {cell}"
        )


class LinearSolveError(ChemordError, RuntimeError):
    """The conjugate-gradient solve did not reach tolerance."""

    def __init__(self, residual: float, iterations: int, tol: float):
        self.residual = residual
        self.iterations = iterations
        self.tol = tol
        super().__init__(
            f"CG stalled at relative residual {residual:.3e} after "
            f"{iterations} iterations (tol {tol:.1e})"
        )


class SteadyStateError(ChemordError, RuntimeError):
    """Pseudo-time marching hit the iteration cap before the residual tolerance."""

    def __init__(self, residual: float, iterations: int, tol: float):
        self.residual = residual
        self.iterations = iterations
        self.tol = tol
        super().__init__(
            f"steady-state residual {residual:.3e} after {iterations} "
            f"iterations (target {tol:.1e})"
        )


class InsufficientDataError(ChemordError, ValueError):
    """Too few usable samples for a fit."""


class LineSearchStallError(ChemordError, RuntimeError):
    """Backtracking found no decrease at the minimum step size.

    Carries the last accepted iterate and the run history so the caller
    can inspect or export them.
    """

    def __init__(self, message: str, last_iterate=None, history=None):
        self.last_iterate = last_iterate
        self.history = history if history is not None else []
        super().__init__(message)


@dataclass(frozen=True)
class ValidationIssue:
    """One admissibility violation found while validating a scenario.

    ``rule`` is a short code identifying which admissibility condition was
    broken (see README: "Validation rule codes"), ``field`` the offending
    entry, ``message`` a human-readable account including the location for
    gridded data.
    """

    rule: str
    field: str
    message: str

    def __str__(self) -> str:  # pragma: no cover - formatting only
        return f"{self.rule}: {self.field}: {self.message}"


class ScenarioValidationError(ChemordError, ValueError):
    """Raised with the complete list of validation issues, not just the first."""

    def __init__(self, issues: list[ValidationIssue]):
        self.issues = list(issues)
        lines = "\n  ".join(str(i) for i in self.issues)
        super().__init__(f"{len(self.issues)} validation issue(s):\n  {lines}")
