"""Composite trial + external-control dataset: construction, CSV ingestion, validation.

The dataset holds rows of (covariates X, source S, treatment A, outcome Y)
with a known constant randomization probability ``p1 = Pr[A=1 | S=1]``.
External rows (S=0) are expected to be untreated unless
``treatment_variation_allowed`` is set.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyFile,
    EmptySubset,
    InvalidIndicator,
    MissingColumn,
    NonNumericCell,
)


class Observation(NamedTuple):
    x: np.ndarray
    s: int
    a: int
    y: float


class ValidationIssue(NamedTuple):
    row: int | None
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    issues: tuple[ValidationIssue, ...]


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TrialDataset:
    """Immutable composite dataset; safe for concurrent reads.

    Rows keep file/generation order. Semantic invariants (arm presence,
    S=0 => A=0, finite values) are reported by :func:`validate`, not
    enforced at construction, so that questionable files can still be
    inspected.
    """

    x: np.ndarray
    s: np.ndarray
    a: np.ndarray
    y: np.ndarray
    covariate_names: tuple[str, ...]
    p1: float
    treatment_variation_allowed: bool = False

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise DimensionMismatch("covariates must form a 2-d array")
        s = np.asarray(self.s, dtype=np.int64)
        a = np.asarray(self.a, dtype=np.int64)
        y = np.asarray(self.y, dtype=float)
        n = x.shape[0]
        if not (s.shape == a.shape == y.shape == (n,)):
            raise DimensionMismatch("x, s, a, y must have one entry per row")
        if len(self.covariate_names) != x.shape[1]:
            raise DimensionMismatch("covariate_names length must match covariate dimension")
        if not 0.0 < float(self.p1) < 1.0:
            raise ValueError(f"p1 must lie in (0, 1), got {self.p1}")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "s", _readonly(s))
        object.__setattr__(self, "a", _readonly(a))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "p1", float(self.p1))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n1(self) -> int:
        return int(np.sum(self.s == 1))

    @property
    def n0(self) -> int:
        return int(np.sum(self.s == 0))

    @property
    def q_hat(self) -> float:
        return self.n1 / self.n

    @property
    def observations(self) -> list[Observation]:
        return [
            Observation(self.x[i], int(self.s[i]), int(self.a[i]), float(self.y[i]))
            for i in range(self.n)
        ]


@dataclass(frozen=True)
class CsvSchema:
    """Column-name mapping for CSV ingestion.

    ``covariates=None`` takes every non-S/A/Y column in header order.
    """

    s: str = "S"
    a: str = "A"
    y: str = "Y"
    covariates: tuple[str, ...] | None = None


def parse_dataset(
    csv_text: str,
    schema: CsvSchema,
    p1: float,
    treatment_variation_allowed: bool = False,
) -> TrialDataset:
    """Parse comma-separated text (header required, UTF-8) into a TrialDataset.

    Row order equals file order; extra columns are ignored. Raises
    MissingColumn, NonNumericCell, InvalidIndicator, or EmptyFile.
    """
    reader = csv.reader(io.StringIO(csv_text))
    rows = [row for row in reader if row]
    if not rows:
        raise EmptyFile("no header row found")
    header = [name.strip() for name in rows[0]]
    body = rows[1:]
    if not body:
        raise EmptyFile("no data rows found")

    if schema.covariates is None:
        covariates = tuple(c for c in header if c not in {schema.s, schema.a, schema.y})
    else:
        covariates = tuple(schema.covariates)
    for col in (schema.s, schema.a, schema.y, *covariates):
        if col not in header:
            raise MissingColumn(col)
    col_index = {name: header.index(name) for name in header}

    def cell(row_values: list[str], row_idx: int, col: str) -> float:
        idx = col_index[col]
        raw = row_values[idx].strip() if idx < len(row_values) else ""
        try:
            return float(raw)
        except ValueError:
            raise NonNumericCell(row_idx, col, raw) from None

    def indicator(row_values: list[str], row_idx: int, col: str) -> int:
        value = cell(row_values, row_idx, col)
        if value not in (0.0, 1.0):
            raise InvalidIndicator(row_idx, col, value)
        return int(value)

    n = len(body)
    s = np.empty(n, dtype=np.int64)
    a = np.empty(n, dtype=np.int64)
    y = np.empty(n, dtype=float)
    x = np.empty((n, len(covariates)), dtype=float)
    for i, row_values in enumerate(body):
        s[i] = indicator(row_values, i, schema.s)
        a[i] = indicator(row_values, i, schema.a)
        y[i] = cell(row_values, i, schema.y)
        for j, col in enumerate(covariates):
            x[i, j] = cell(row_values, i, col)

    return TrialDataset(
        x=x,
        s=s,
        a=a,
        y=y,
        covariate_names=covariates,
        p1=p1,
        treatment_variation_allowed=treatment_variation_allowed,
    )


def serialize_dataset(ds: TrialDataset, schema: CsvSchema | None = None) -> str:
    """Emit CSV text that parses back to the identical dataset.

    Reals are written with 17 significant digits, which round-trips
    binary64 exactly.
    """
    schema = schema or CsvSchema()
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow([schema.s, schema.a, schema.y, *ds.covariate_names])
    for i in range(ds.n):
        writer.writerow(
            [
                int(ds.s[i]),
                int(ds.a[i]),
                format(float(ds.y[i]), ".17g"),
                *(format(float(v), ".17g") for v in ds.x[i]),
            ]
        )
    return out.getvalue()


def validate(ds: TrialDataset) -> ValidationReport:
    """Check every dataset invariant; violations are data, not faults."""
    issues: list[ValidationIssue] = []

    for i in range(ds.n):
        if int(ds.s[i]) not in (0, 1):
            issues.append(ValidationIssue(i, "invalid_indicator", f"S must be 0/1, got {ds.s[i]}"))
        if int(ds.a[i]) not in (0, 1):
            issues.append(ValidationIssue(i, "invalid_indicator", f"A must be 0/1, got {ds.a[i]}"))

    bad_rows = ~(np.isfinite(ds.y) & np.isfinite(ds.x).all(axis=1))
    for i in np.flatnonzero(bad_rows):
        issues.append(ValidationIssue(int(i), "non_finite", "covariates and outcome must be finite"))

    if not ds.treatment_variation_allowed:
        treated_external = (ds.s == 0) & (ds.a == 1)
        for i in np.flatnonzero(treated_external):
            issues.append(
                ValidationIssue(int(i), "external_treated", "external row (S=0) has A=1")
            )

    if not np.any((ds.s == 1) & (ds.a == 1)):
        issues.append(ValidationIssue(None, "missing_arm", "no trial row with A=1"))
    if not np.any((ds.s == 1) & (ds.a == 0)):
        issues.append(ValidationIssue(None, "missing_arm", "no trial row with A=0"))
    if ds.n0 < 1:
        issues.append(ValidationIssue(None, "missing_external", "no external row (S=0)"))
    if ds.n1 < 2:
        issues.append(ValidationIssue(None, "too_few_trial", f"need n1 >= 2 trial rows, got {ds.n1}"))

    return ValidationReport(ok=not issues, issues=tuple(issues))


def subset(
    ds: TrialDataset,
    predicate: Callable[[int, int], bool],
    require_nonempty: bool = True,
) -> TrialDataset:
    """Rows whose (s, a) satisfy the predicate, in original order.

    The predicate must be a pure function of (s, a); it is evaluated once
    per distinct combination.
    """
    keep = np.zeros(ds.n, dtype=bool)
    for s_val in (0, 1):
        for a_val in (0, 1):
            if predicate(s_val, a_val):
                keep |= (ds.s == s_val) & (ds.a == a_val)
    if require_nonempty and not keep.any():
        raise EmptySubset("no row matches the predicate")
    return TrialDataset(
        x=ds.x[keep],
        s=ds.s[keep],
        a=ds.a[keep],
        y=ds.y[keep],
        covariate_names=ds.covariate_names,
        p1=ds.p1,
        treatment_variation_allowed=ds.treatment_variation_allowed,
    )
