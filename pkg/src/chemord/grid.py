"""Rectangular grids, gridded fields, and scenario-input validation.

Fields live at cell centers of a uniform 1D interval or 2D rectangle and are
plain numpy arrays shaped like ``grid.shape``.  Scalars are accepted wherever
a field is expected and broadcast on demand; time-varying inputs are callables
``t -> field``.  Zero-flux topology is a property of the operators (see
:mod:`chemord.pde`), not of the stored arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ConformanceError, ScenarioValidationError, ValidationIssue
from .kinetics import (
    RULE_DIFFUSION,
    RULE_INITIAL,
    RULE_SOURCES,
    ModelParams,
    SpeciesBounds,
)

FieldLike = Union[float, np.ndarray, Callable[[float], np.ndarray]]

SPECIES = ("N", "T", "I", "U")


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid on an interval or rectangle.

    ``extents`` are the side lengths, ``cells`` the cell counts per axis
    (at least 3 each).  Cell centers sit at ``(i + 0.5) * h``.
    """

    extents: tuple[float, ...]
    cells: tuple[int, ...]

    def __post_init__(self):
        if len(self.extents) != len(self.cells) or len(self.cells) not in (1, 2):
            raise ConformanceError(
                f"grid must be 1D or 2D with matching extents/cells, "
                f"got extents={self.extents}, cells={self.cells}"
            )
        if any(n < 3 for n in self.cells):
            raise ConformanceError(f"need >= 3 cells per axis, got {self.cells}")
        if any(L <= 0 for L in self.extents):
            raise ConformanceError(f"extents must be positive, got {self.extents}")

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.cells

    @property
    def spacings(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.extents, self.cells))

    @property
    def cell_volume(self) -> float:
        vol = 1.0
        for h in self.spacings:
            vol *= h
        return vol

    def centers(self) -> tuple[np.ndarray, ...]:
        """Arrays of cell-center coordinates, one per axis."""
        return tuple(
            (np.arange(n) + 0.5) * h for n, h in zip(self.cells, self.spacings)
        )

    def coordinate_columns(self) -> list[np.ndarray]:
        """Per-cell coordinates flattened in C order, for CSV export."""
        axes = self.centers()
        if self.dim == 1:
            return [axes[0]]
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        return [X.ravel(), Y.ravel()]

    def check_field(self, name: str, arr: np.ndarray) -> np.ndarray:
        arr = np.asarray(arr, dtype=float)
        if arr.shape != self.shape:
            raise ConformanceError(
                f"field {name!r} has shape {arr.shape}, grid expects {self.shape}"
            )
        return arr


def as_field(value: FieldLike, grid: Grid, t: float = 0.0) -> np.ndarray:
    """Materialize a FieldLike as a full array on the grid."""
    if callable(value):
        value = value(t)
    if np.ndim(value) == 0:
        return np.full(grid.shape, float(value))
    return grid.check_field("field", np.asarray(value, dtype=float))


def field_at(value: FieldLike, t: float):
    """Evaluate at time t without broadcasting scalars (operators broadcast)."""
    if callable(value):
        return value(t)
    return value


def _first_violation(mask: np.ndarray) -> str:
    idx = np.argwhere(mask)
    count = idx.shape[0]
    where = tuple(int(k) for k in idx[0])
    loc = where[0] if len(where) == 1 else where
    return f"at cell {loc}" + (f" (+{count - 1} more)" if count > 1 else "")


def _field_issues(
    rule: str, name: str, value: FieldLike, grid: Grid,
    low: float | None, high: float | None, low_strict: bool,
) -> list[ValidationIssue]:
    """Bound checks for one field; callables are sampled at t = 0."""
    try:
        arr = as_field(value, grid)
    except ConformanceError as exc:
        return [ValidationIssue(rule, name, str(exc))]
    out = []
    bad = ~np.isfinite(arr)
    if bad.any():
        out.append(ValidationIssue(rule, name, f"non-finite {_first_violation(bad)}"))
        return out
    if low is not None:
        bad = arr <= low if low_strict else arr < low
        if bad.any():
            op = ">" if low_strict else ">="
            out.append(ValidationIssue(
                rule, name, f"must be {op} {low:g}, violated {_first_violation(bad)}"
            ))
    if high is not None:
        bad = arr > high
        if bad.any():
            out.append(ValidationIssue(
                rule, name, f"exceeds {high:g} {_first_violation(bad)}"
            ))
    return out


@dataclass(frozen=True)
class DiffusionCoeffs:
    """Per-species diffusion coefficients with configured admissibility bounds.

    Each entry is a scalar, a grid field, or a callable ``t -> field``.
    ``bound_low``/``bound_high`` pin the admissible band; when omitted they
    default to the sampled min/max at t = 0 (still requiring positivity).
    """

    d1: FieldLike
    d2: FieldLike
    d3: FieldLike
    d4: FieldLike
    bound_low: float | None = None
    bound_high: float | None = None

    def per_species(self) -> tuple[FieldLike, FieldLike, FieldLike, FieldLike]:
        return (self.d1, self.d2, self.d3, self.d4)

    def at(self, t: float):
        return tuple(field_at(d, t) for d in self.per_species())

    def max_value(self, grid: Grid, t: float = 0.0) -> float:
        if self.bound_high is not None:
            return float(self.bound_high)
        return max(float(np.max(as_field(d, grid, t))) for d in self.per_species())

    def issues(self, grid: Grid) -> list[ValidationIssue]:
        out = []
        low = self.bound_low if self.bound_low is not None else 0.0
        if self.bound_low is not None and self.bound_low <= 0.0:
            out.append(ValidationIssue(
                RULE_DIFFUSION, "bound_low", f"must be > 0, got {self.bound_low!r}"
            ))
        if (
            self.bound_low is not None
            and self.bound_high is not None
            and self.bound_high < self.bound_low
        ):
            out.append(ValidationIssue(
                RULE_DIFFUSION, "bound_high",
                f"must be >= bound_low, got {self.bound_high!r}"
            ))
        for name, d in zip(("d1", "d2", "d3", "d4"), self.per_species()):
            out.extend(_field_issues(
                RULE_DIFFUSION, name, d, grid,
                low=low, high=self.bound_high,
                low_strict=self.bound_low is None,
            ))
        return out


@dataclass(frozen=True)
class SourceFields:
    """Immune influx s(x,t) and drug injection v(x,t), both nonnegative."""

    s: FieldLike = 0.0
    v: FieldLike = 0.0

    def at(self, t: float):
        return field_at(self.s, t), field_at(self.v, t)

    def sup_s(self, grid: Grid, t: float = 0.0) -> float:
        return float(np.max(as_field(self.s, grid, t)))

    def sup_v(self, grid: Grid, t: float = 0.0) -> float:
        return float(np.max(as_field(self.v, grid, t)))

    def issues(self, grid: Grid) -> list[ValidationIssue]:
        out = []
        for name, f in (("s", self.s), ("v", self.v)):
            out.extend(_field_issues(
                RULE_SOURCES, name, f, grid, low=0.0, high=None, low_strict=False
            ))
        return out


@dataclass
class State:
    """The four concentration fields at one instant."""

    N: np.ndarray
    T: np.ndarray
    I: np.ndarray
    U: np.ndarray

    @classmethod
    def uniform(cls, grid: Grid, N=0.0, T=0.0, I=0.0, U=0.0) -> "State":
        return cls(*(np.full(grid.shape, float(x)) for x in (N, T, I, U)))

    @classmethod
    def from_stack(cls, stack: np.ndarray) -> "State":
        return cls(*(np.array(stack[i]) for i in range(4)))

    def stack(self) -> np.ndarray:
        return np.stack([self.N, self.T, self.I, self.U])

    def copy(self) -> "State":
        return State(self.N.copy(), self.T.copy(), self.I.copy(), self.U.copy())

    def fields(self):
        return dict(zip(SPECIES, (self.N, self.T, self.I, self.U)))

    def sup(self) -> SpeciesBounds:
        return SpeciesBounds(*(float(np.max(np.abs(f))) for f in
                               (self.N, self.T, self.I, self.U)))

    def issues(self, grid: Grid) -> list[ValidationIssue]:
        out = []
        for name, f in self.fields().items():
            out.extend(_field_issues(
                RULE_INITIAL, f"initial {name}", f, grid,
                low=0.0, high=None, low_strict=False,
            ))
        return out


def validate(
    params: ModelParams,
    diffusion: DiffusionCoeffs,
    sources: SourceFields,
    initial: State,
    grid: Grid,
) -> list[ValidationIssue]:
    """Collect every admissibility violation across all scenario inputs."""
    out: list[ValidationIssue] = []
    out.extend(params.issues())
    out.extend(diffusion.issues(grid))
    out.extend(sources.issues(grid))
    out.extend(initial.issues(grid))
    return out


def ensure_valid(
    params: ModelParams,
    diffusion: DiffusionCoeffs,
    sources: SourceFields,
    initial: State,
    grid: Grid,
) -> None:
    issues = validate(params, diffusion, sources, initial, grid)
    if issues:
        raise ScenarioValidationError(issues)
