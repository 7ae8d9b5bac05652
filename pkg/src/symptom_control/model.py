"""Domain types, cohort ingestion and transition extraction.

Observations CSV layout::

    patient_id,day,bdi_01,...,bdi_21

``day`` is either a number of days or an ISO calendar date; both are
normalised so that each patient's first observation sits at day 0.
"""
from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from typing import IO, Iterable, Mapping, Sequence, Union

import numpy as np

from .exceptions import InsufficientDataError, ValidationError

N_ITEMS = 21
ITEM_COLUMNS = tuple(f"bdi_{i:02d}" for i in range(1, N_ITEMS + 1))
OBSERVATION_HEADER = ("patient_id", "day") + ITEM_COLUMNS
MODERATOR_COLUMNS = (
    "age", "sex", "prs_mdd", "prs_bd", "ctq", "rs_total", "rs_accept", "rs_comp",
    "ancestry_c1", "ancestry_c2", "ancestry_c3",
)
MODERATOR_HEADER = ("patient_id",) + MODERATOR_COLUMNS
CSV_SCHEMA = "bdi21-csv"

Source = Union[str, os.PathLike, IO[bytes], IO[str], bytes]


@dataclass(frozen=True)
class ObservationPoint:
    day: float
    items: tuple[int, ...]

    def __post_init__(self):
        if len(self.items) != N_ITEMS:
            raise ValidationError(f"expected {N_ITEMS} items, got {len(self.items)}")
        for k, v in enumerate(self.items):
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or not 0 <= v <= 3:
                raise ValidationError(f"item {ITEM_COLUMNS[k]}={v!r} outside {{0,1,2,3}}")
        if not (math.isfinite(self.day) and self.day >= 0):
            raise ValidationError(f"day must be finite and >= 0, got {self.day!r}")


@dataclass(frozen=True)
class SymptomSeries:
    patient_id: str
    observations: tuple[ObservationPoint, ...]
    moderators: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.observations:
            raise ValidationError(f"patient {self.patient_id!r} has no observations")
        days = [o.day for o in self.observations]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise ValidationError(f"patient {self.patient_id!r}: days must strictly increase")
        object.__setattr__(self, "observations", tuple(self.observations))
        object.__setattr__(self, "moderators", dict(self.moderators))

    @property
    def n_measurements(self) -> int:
        return len(self.observations)

    @property
    def items(self) -> np.ndarray:
        """Observation-by-item integer matrix, shape (n, 21)."""
        return np.array([o.items for o in self.observations], dtype=np.int64)

    @property
    def days(self) -> np.ndarray:
        return np.array([o.day for o in self.observations], dtype=float)

    @property
    def sum_scores(self) -> np.ndarray:
        return self.items.sum(axis=1)

    @classmethod
    def from_arrays(cls, patient_id, days, items, moderators=None) -> "SymptomSeries":
        items = np.asarray(items)
        obs = tuple(
            ObservationPoint(float(d), tuple(int(v) for v in row))
            for d, row in zip(days, items)
        )
        return cls(str(patient_id), obs, dict(moderators or {}))


@dataclass(frozen=True)
class Exclusion:
    patient_id: str
    reason: str

    def to_dict(self) -> dict:
        return {"patient_id": self.patient_id, "reason": self.reason}


@dataclass(frozen=True)
class Cohort:
    patients: tuple[SymptomSeries, ...]
    provenance: Mapping[str, str] = field(default_factory=dict)
    exclusions: tuple[Exclusion, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        ids = [p.patient_id for p in self.patients]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise ValidationError(f"duplicate patient ids: {dup}")

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def __getitem__(self, patient_id: str) -> SymptomSeries:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]


@dataclass(frozen=True)
class TransitionPair:
    t: int
    bdi_t: int
    bdi_next: int
    delta_bdi: int
    delta_days: float


def _read_text(source: Source) -> tuple[str, str]:
    if isinstance(source, bytes):
        return source.decode("utf-8"), "<bytes>"
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return fh.read(), os.fspath(source)
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return data, getattr(source, "name", "<stream>")


def _parse_day(raw: str, line: int) -> float:
    raw = raw.strip()
    try:
        value = float(raw)
    except ValueError:
        try:
            return float(date.fromisoformat(raw).toordinal())
        except ValueError:
            raise ValidationError(f"line {line}: column 'day' is neither a number nor an ISO date: {raw!r}") from None
    if not math.isfinite(value):
        raise ValidationError(f"line {line}: column 'day' is not finite")
    return value


def _parse_item(raw: str, line: int, column: str) -> int:
    raw = raw.strip()
    if raw == "":
        raise ValidationError(f"line {line}: column {column!r} is missing (no imputation)")
    try:
        value = float(raw)
    except ValueError:
        raise ValidationError(f"line {line}: column {column!r} is not numeric: {raw!r}") from None
    if value != int(value) or not 0 <= value <= 3:
        raise ValidationError(f"line {line}: column {column!r}={raw} outside {{0,1,2,3}}")
    return int(value)


def read_moderators(source: Source) -> dict[str, dict[str, float]]:
    """Parse a moderator table into ``{patient_id: {column: value}}``.

    Empty cells are treated as missing and left out of the patient's map.
    Columns outside the documented header are kept with a warning.
    """
    text, name = _read_text(source)
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or "patient_id" not in reader.fieldnames:
        raise ValidationError(f"{name}: moderator table needs a 'patient_id' column")
    unknown = [c for c in reader.fieldnames if c != "patient_id" and c not in MODERATOR_COLUMNS]
    if unknown:
        warnings.warn(f"{name}: unknown moderator columns kept: {unknown}", stacklevel=2)
    out: dict[str, dict[str, float]] = {}
    for line, row in enumerate(reader, start=2):
        pid = (row.get("patient_id") or "").strip()
        if not pid:
            raise ValidationError(f"{name} line {line}: empty patient_id")
        if pid in out:
            raise ValidationError(f"{name} line {line}: duplicate moderator row for {pid!r}")
        values = {}
        for col in reader.fieldnames:
            if col == "patient_id":
                continue
            raw = (row.get(col) or "").strip()
            if raw == "":
                continue
            try:
                values[col] = float(raw)
            except ValueError:
                raise ValidationError(f"{name} line {line}: column {col!r} is not numeric: {raw!r}") from None
        out[pid] = values
    return out


def parse_cohort(source: Source, format: str = CSV_SCHEMA, moderators: Source | None = None) -> Cohort:
    """Read an observations CSV (and optional moderator CSV) into a validated Cohort."""
    if format != CSV_SCHEMA:
        raise ValidationError(f"unknown format {format!r}; supported: {CSV_SCHEMA!r}")
    text, name = _read_text(source)
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ValidationError(f"{name}: empty file") from None
    if tuple(header) != OBSERVATION_HEADER:
        raise ValidationError(f"{name} line 1: header must be {','.join(OBSERVATION_HEADER)}")

    rows: dict[str, list[tuple[float, tuple[int, ...], int]]] = {}
    for line, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ValidationError(f"{name} line {line}: expected {len(header)} fields, got {len(row)}")
        pid = row[0].strip()
        if not pid:
            raise ValidationError(f"{name} line {line}: empty patient_id")
        day = _parse_day(row[1], line)
        items = tuple(_parse_item(v, line, col) for v, col in zip(row[2:], ITEM_COLUMNS))
        rows.setdefault(pid, []).append((day, items, line))

    mods = read_moderators(moderators) if moderators is not None else {}
    for pid in sorted(set(mods) - set(rows)):
        warnings.warn(f"moderator row for unknown patient {pid!r} ignored", stacklevel=2)

    patients = []
    for pid, obs in rows.items():
        obs.sort(key=lambda r: r[0])
        for (d0, _, l0), (d1, _, l1) in zip(obs, obs[1:]):
            if d0 == d1:
                raise ValidationError(f"{name} lines {l0},{l1}: duplicate timestamp for patient {pid!r}")
        origin = obs[0][0]
        points = tuple(ObservationPoint(d - origin, items) for d, items, _ in obs)
        patients.append(SymptomSeries(pid, points, mods.get(pid, {})))

    provenance = {
        "source": name,
        "ingested_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "n_moderator_rows": str(len(mods)),
    }
    return Cohort(tuple(patients), provenance)


def _format_number(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def write_observations(cohort: Cohort | Iterable[SymptomSeries], dest: IO[str]) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(OBSERVATION_HEADER)
    for s in cohort:
        for o in s.observations:
            w.writerow([s.patient_id, _format_number(o.day), *o.items])


def write_moderators(cohort: Cohort | Iterable[SymptomSeries], dest: IO[str],
                     columns: Sequence[str] = MODERATOR_COLUMNS) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(("patient_id", *columns))
    for s in cohort:
        w.writerow([s.patient_id, *(_format_number(s.moderators[c]) if c in s.moderators else "" for c in columns)])


def serialize_cohort(cohort: Cohort) -> str:
    buf = io.StringIO()
    write_observations(cohort, buf)
    return buf.getvalue()


def filter_eligible(cohort: Cohort, min_obs: int = 8) -> Cohort:
    """Drop series with fewer than ``min_obs`` measurements, logging each exclusion."""
    if min_obs < 2:
        raise ValidationError("min_obs must be >= 2")
    kept, dropped = [], []
    for s in cohort:
        if s.n_measurements >= min_obs:
            kept.append(s)
        else:
            dropped.append(Exclusion(s.patient_id, f"only {s.n_measurements} measurements (< {min_obs})"))
    return replace(cohort, patients=tuple(kept), exclusions=cohort.exclusions + tuple(dropped))


def sum_score(obs: ObservationPoint) -> int:
    return int(sum(obs.items))


def transitions(series: SymptomSeries) -> list[TransitionPair]:
    obs = series.observations
    if len(obs) < 2:
        raise InsufficientDataError(f"patient {series.patient_id!r}: need >= 2 observations for transitions")
    out = []
    for t, (a, b) in enumerate(zip(obs, obs[1:])):
        s0, s1 = sum_score(a), sum_score(b)
        out.append(TransitionPair(t, s0, s1, s1 - s0, b.day - a.day))
    return out
