"""Panel ingestion, validation, and treatment-exposure encoding.

Raw rows become a :class:`PanelDataset`: a rectangular (unit, time) panel
with a binary absorbing treatment indicator, a fixed-width covariate vector
per observation, and derived adoption cohorts g(i) = min{t : D_it = 1}.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    DuplicateIndexError,
    EmptyControlPoolError,
    FieldTypeError,
    MissingFieldError,
    NonAbsorbingTreatmentError,
    NonFiniteValueError,
    UnknownPeriodError,
    UnknownUnitError,
)

REQUIRED_COLUMNS = ("unit", "time", "outcome", "treatment")


@dataclass(frozen=True)
class Cohort:
    """Adoption cohort of a unit: first treated period, or never treated."""

    first_treated: Optional[int] = None

    @property
    def ever_treated(self) -> bool:
        return self.first_treated is not None

    def __repr__(self) -> str:
        if self.first_treated is None:
            return "Cohort(never)"
        return f"Cohort(first_treated={self.first_treated})"


NEVER_TREATED = Cohort(None)


@dataclass(frozen=True)
class PanelObservation:
    """One (unit, time) row: outcome Y, binary exposure D, covariates X."""

    unit_id: str
    time: int
    outcome: float
    treatment: int
    covariates: tuple[float, ...]


class PanelDataset:
    """Validated, immutable panel in canonical (unit, time) order.

    Attributes
    ----------
    observations : tuple of PanelObservation
        Sorted by (unit_id, time).
    units : tuple of str
        Sorted unit identifiers.
    periods : tuple of int
        Sorted distinct time periods.
    cohort : dict
        unit_id -> Cohort.
    covariate_names : tuple of str

    Numpy views aligned to observation order are precomputed: ``unit_codes``,
    ``time_codes``, ``outcomes``, ``treatments``, ``covariates`` and the
    per-unit cohort array ``cohort_times`` (np.inf for never treated).
    """

    __slots__ = (
        "observations", "units", "periods", "cohort", "covariate_names",
        "unit_codes", "time_codes", "outcomes", "treatments", "covariates",
        "cohort_times", "_unit_index", "_period_index", "_unit_rows",
    )

    def __init__(self, observations: Sequence[PanelObservation],
                 covariate_names: Sequence[str]):
        obs = tuple(sorted(observations, key=lambda o: (o.unit_id, o.time)))
        if not obs:
            raise MissingFieldError("no observations supplied")
        p = len(covariate_names)
        units = tuple(sorted({o.unit_id for o in obs}))
        periods = tuple(sorted({o.time for o in obs}))
        unit_index = {u: i for i, u in enumerate(units)}
        period_index = {t: i for i, t in enumerate(periods)}

        seen: set[tuple[str, int]] = set()
        for o in obs:
            key = (o.unit_id, o.time)
            if key in seen:
                raise DuplicateIndexError(
                    f"duplicate (unit, time) pair ({o.unit_id!r}, {o.time})")
            seen.add(key)
            if len(o.covariates) != p:
                raise FieldTypeError(
                    f"unit {o.unit_id!r} at t={o.time}: expected {p} covariates, "
                    f"got {len(o.covariates)}")

        cohort: dict[str, Cohort] = {}
        i = 0
        n = len(obs)
        while i < n:
            j = i
            unit = obs[i].unit_id
            first: Optional[int] = None
            while j < n and obs[j].unit_id == unit:
                o = obs[j]
                if o.treatment == 1 and first is None:
                    first = o.time
                elif o.treatment == 0 and first is not None:
                    raise NonAbsorbingTreatmentError(
                        f"unit {unit!r}: treatment reverts to 0 at t={o.time} "
                        f"after first treatment at t={first}")
                j += 1
            cohort[unit] = Cohort(first) if first is not None else NEVER_TREATED
            i = j

        treated_times = {c.first_treated for c in cohort.values() if c.ever_treated}
        any_never = any(not c.ever_treated for c in cohort.values())
        if not any_never and len(treated_times) < 2:
            raise EmptyControlPoolError(
                "every unit is treated in the same cohort; no never-treated or "
                "later-treated unit can serve as a control")

        self.observations = obs
        self.units = units
        self.periods = periods
        self.cohort = cohort
        self.covariate_names = tuple(covariate_names)
        self._unit_index = unit_index
        self._period_index = period_index

        self.unit_codes = np.fromiter((unit_index[o.unit_id] for o in obs),
                                      dtype=np.intp, count=n)
        self.time_codes = np.fromiter((period_index[o.time] for o in obs),
                                      dtype=np.intp, count=n)
        self.outcomes = np.fromiter((o.outcome for o in obs),
                                    dtype=np.float64, count=n)
        self.treatments = np.fromiter((o.treatment for o in obs),
                                      dtype=np.float64, count=n)
        if p:
            self.covariates = np.array([o.covariates for o in obs],
                                       dtype=np.float64)
        else:
            self.covariates = np.empty((n, 0), dtype=np.float64)
        self.cohort_times = np.array(
            [cohort[u].first_treated if cohort[u].ever_treated else np.inf
             for u in units], dtype=np.float64)

        unit_rows: dict[str, np.ndarray] = {}
        start = 0
        for k in range(1, n + 1):
            if k == n or obs[k].unit_id != obs[start].unit_id:
                unit_rows[obs[start].unit_id] = np.arange(start, k, dtype=np.intp)
                start = k
        self._unit_rows = unit_rows

        for arr in (self.unit_codes, self.time_codes, self.outcomes,
                    self.treatments, self.covariates, self.cohort_times):
            arr.setflags(write=False)

    # -- basic introspection --------------------------------------------------

    @property
    def n_obs(self) -> int:
        return len(self.observations)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def unit_code(self, unit_id: str) -> int:
        try:
            return self._unit_index[unit_id]
        except KeyError:
            raise UnknownUnitError(f"unknown unit {unit_id!r}") from None

    def period_code(self, time: int) -> int:
        try:
            return self._period_index[time]
        except KeyError:
            raise UnknownPeriodError(f"unknown period {time}") from None

    def rows_of_unit(self, unit_id: str) -> np.ndarray:
        """Observation-row indices of one unit, contiguous in canonical order."""
        try:
            return self._unit_rows[unit_id]
        except KeyError:
            raise UnknownUnitError(f"unknown unit {unit_id!r}") from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PanelDataset):
            return NotImplemented
        return (self.observations == other.observations
                and self.covariate_names == other.covariate_names)

    def __hash__(self):  # identity hash; datasets are mutable-free but large
        return id(self)

    def __repr__(self) -> str:
        n_never = sum(1 for c in self.cohort.values() if not c.ever_treated)
        return (f"PanelDataset(n_obs={self.n_obs}, units={self.n_units}, "
                f"periods={self.n_periods}, p={self.n_covariates}, "
                f"never_treated={n_never})")


# -- row parsing --------------------------------------------------------------

def _parse_int(value, row: int, field: str) -> int:
    if isinstance(value, bool):
        raise FieldTypeError(f"row {row}: field {field!r} must be an integer")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if math.isfinite(value) and value == int(value):
            return int(value)
        raise FieldTypeError(f"row {row}: field {field!r} = {value!r} is not an integer")
    try:
        text = str(value).strip()
        f = float(text)
    except ValueError:
        raise FieldTypeError(f"row {row}: field {field!r} = {value!r} is not an integer") from None
    if not (math.isfinite(f) and f == int(f)):
        raise FieldTypeError(f"row {row}: field {field!r} = {value!r} is not an integer")
    return int(f)


def _parse_float(value, row: int, field: str) -> float:
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise FieldTypeError(f"row {row}: field {field!r} = {value!r} is not a number") from None
    if not math.isfinite(f):
        raise NonFiniteValueError(f"row {row}: field {field!r} is not finite")
    return f


def _parse_treatment(value, row: int) -> int:
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise FieldTypeError(f"row {row}: field 'treatment' = {value!r} is not 0/1") from None
    if f == 0.0:
        return 0
    if f == 1.0:
        return 1
    raise FieldTypeError(f"row {row}: field 'treatment' = {value!r} is not 0/1")


def _get(record: Mapping, field: str, row: int):
    if field not in record or record[field] is None or record[field] == "":
        raise MissingFieldError(f"row {row}: missing field {field!r}")
    return record[field]


def build_panel(records: Iterable[Mapping],
                covariate_names: Optional[Sequence[str]] = None) -> PanelDataset:
    """Validate raw rows and assemble a :class:`PanelDataset`.

    Parameters
    ----------
    records : iterable of mappings
        Each row must supply ``unit``, ``time``, ``outcome``, ``treatment``
        and one value per covariate column.
    covariate_names : sequence of str, optional
        Covariate column names. Defaults to all non-required keys of the
        first row, in insertion order.

    Raises
    ------
    MissingFieldError, FieldTypeError, NonFiniteValueError,
    DuplicateIndexError, NonAbsorbingTreatmentError, EmptyControlPoolError
    """
    records = list(records)
    if not records:
        raise MissingFieldError("no input rows")
    if covariate_names is None:
        covariate_names = [k for k in records[0].keys() if k not in REQUIRED_COLUMNS]
    covariate_names = list(covariate_names)

    observations = []
    for row, rec in enumerate(records):
        unit = str(_get(rec, "unit", row))
        time = _parse_int(_get(rec, "time", row), row, "time")
        outcome = _parse_float(_get(rec, "outcome", row), row, "outcome")
        treatment = _parse_treatment(_get(rec, "treatment", row), row)
        covs = tuple(_parse_float(_get(rec, name, row), row, name)
                     for name in covariate_names)
        observations.append(PanelObservation(unit, time, outcome, treatment, covs))
    return PanelDataset(observations, covariate_names)


def to_records(panel: PanelDataset) -> list[dict]:
    """Serialize back to raw rows (inverse of :func:`build_panel`)."""
    out = []
    for o in panel.observations:
        rec = {"unit": o.unit_id, "time": o.time, "outcome": o.outcome,
               "treatment": o.treatment}
        rec.update(zip(panel.covariate_names, o.covariates))
        out.append(rec)
    return out


# -- cohort / event-time queries ----------------------------------------------

def event_time(panel: PanelDataset, unit: str, t: int) -> Optional[int]:
    """Periods elapsed since adoption, e = t - g(i); None if never treated."""
    if unit not in panel.cohort:
        raise UnknownUnitError(f"unknown unit {unit!r}")
    if t not in panel._period_index:
        raise UnknownPeriodError(f"unknown period {t}")
    c = panel.cohort[unit]
    if not c.ever_treated:
        return None
    return t - c.first_treated


def feature_matrix(panel: PanelDataset, standardize: bool = True):
    """Covariate matrix in canonical observation order.

    With ``standardize`` each column is centered and scaled to unit
    population standard deviation; zero-variance columns are centered only
    and their scale is reported as 1. Returns ``(matrix, means, scales)``.
    """
    X = np.array(panel.covariates, dtype=np.float64)
    if not standardize:
        return X, np.zeros(X.shape[1]), np.ones(X.shape[1])
    means = X.mean(axis=0) if X.shape[0] else np.zeros(X.shape[1])
    scales = X.std(axis=0, ddof=0) if X.shape[0] else np.ones(X.shape[1])
    scales = np.where(scales == 0.0, 1.0, scales)
    X = (X - means) / scales
    return X, means, scales


def pivot_unit_time(panel: PanelDataset, values: np.ndarray):
    """Arrange an observation-aligned vector into a (units x periods) matrix.

    Missing (unit, period) cells are NaN; also returns the presence mask.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (panel.n_obs,):
        raise ValueError(f"expected vector of length {panel.n_obs}")
    mat = np.full((panel.n_units, panel.n_periods), np.nan)
    mat[panel.unit_codes, panel.time_codes] = values
    present = np.zeros((panel.n_units, panel.n_periods), dtype=bool)
    present[panel.unit_codes, panel.time_codes] = True
    return mat, present


def subset_units(panel: PanelDataset, unit_ids: Sequence[str],
                 fresh_ids: Optional[Sequence[str]] = None) -> PanelDataset:
    """Panel restricted to the given units (repeats allowed with fresh ids).

    Used for subgroup estimation and cluster-bootstrap resampling; the
    result passes full validation, so an invalid subset (e.g. one with no
    control pool) raises the corresponding panel error.
    """
    if fresh_ids is None:
        if len(set(unit_ids)) != len(unit_ids):
            raise DuplicateIndexError(
                "repeated units require fresh_ids to keep (unit, time) unique")
        fresh_ids = list(unit_ids)
    elif len(fresh_ids) != len(unit_ids):
        raise ValueError("fresh_ids must parallel unit_ids")
    observations = []
    for orig, new in zip(unit_ids, fresh_ids):
        for r in panel.rows_of_unit(orig):
            o = panel.observations[r]
            observations.append(PanelObservation(
                str(new), o.time, o.outcome, o.treatment, o.covariates))
    return PanelDataset(observations, panel.covariate_names)


# -- CSV interface -------------------------------------------------------------

def read_panel_csv(path) -> PanelDataset:
    """Read the canonical CSV layout: unit,time,outcome,treatment,<covariates...>."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingFieldError(f"{path}: empty file") from None
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise MissingFieldError(f"{path}: missing {col!r} column")
        idx = {name: header.index(name) for name in header}
        covariate_names = [c for c in header if c not in REQUIRED_COLUMNS]
        records = []
        for line, row in enumerate(reader):
            if not row:
                continue
            if len(row) != len(header):
                raise FieldTypeError(
                    f"{path}: line {line + 2} has {len(row)} fields, "
                    f"header has {len(header)}")
            records.append({name: row[idx[name]] for name in header})
    return build_panel(records, covariate_names)


def write_panel_csv(panel: PanelDataset, path) -> None:
    """Write the canonical CSV layout, lossless for finite doubles."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(REQUIRED_COLUMNS) + list(panel.covariate_names))
        for o in panel.observations:
            writer.writerow([o.unit_id, o.time, repr(o.outcome), o.treatment]
                            + [repr(v) for v in o.covariates])
