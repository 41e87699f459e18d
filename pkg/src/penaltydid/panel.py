"""Monthly analysis panels built from raw insurance claims.

Calendar months are integer indices with 0 = January 2010. A unit's cohort
(``group``) is the month of her first birth; never-treated units carry the
``NEVER`` sentinel and have no event time.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._backend import kernels
from ._io import atomic_write_csv, fmt

log = logging.getLogger(__name__)

NEVER = np.iinfo(np.int64).max
PILLS_PER_MONTH = 30
BASE_YEAR = 2010


class ClaimKind(str, Enum):
    RX = "rx"
    PSY = "psy"
    GP = "gp"


@dataclass(frozen=True)
class ClaimRecord:
    unit_id: str
    calendar_month: int
    kind: ClaimKind
    n_packages: int | None = None
    pills_per_package: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ClaimKind(self.kind))
        if self.kind is ClaimKind.RX:
            if not self.n_packages or not self.pills_per_package:
                raise ValueError(f"rx claim for {self.unit_id} needs package and pill counts")
            if self.n_packages < 1 or self.pills_per_package < 1:
                raise ValueError(f"rx claim for {self.unit_id} has non-positive counts")
        elif self.n_packages is not None or self.pills_per_package is not None:
            raise ValueError(f"{self.kind.value} claim for {self.unit_id} must not carry package counts")

    @property
    def spell_months(self) -> int:
        return math.ceil(self.n_packages * self.pills_per_package / PILLS_PER_MONTH)


def age_from_months(birth_year, first_child_month):
    """Age in years at ``first_child_month``, birthdays placed mid-year (July)."""
    born = (np.asarray(birth_year) - BASE_YEAR) * 12 + 6
    return (np.asarray(first_child_month) - born) / 12.0


@dataclass(frozen=True)
class UnitMeta:
    unit_id: str
    birth_year: int
    first_child_month: int | None = None
    employed_at_birth: bool = False
    subsidy: bool = False
    cesarean: bool = False
    # insurance coverage; None means the whole window
    enrolled_from: int | None = None
    enrolled_to: int | None = None
    # explicit age overrides the birth-year derivation (checked for consistency)
    age_override: float | None = None
    placebo_month: int | None = None
    placebo_age: float | None = None

    @property
    def treated(self) -> bool:
        return self.first_child_month is not None

    @property
    def age_at_first_birth(self) -> float | None:
        if self.age_override is not None:
            return float(self.age_override)
        if self.first_child_month is None:
            return None
        return float(age_from_months(self.birth_year, self.first_child_month))

    def balanced_flag(self, window: tuple[int, int]) -> bool:
        lo, hi = window
        start = lo if self.enrolled_from is None else self.enrolled_from
        stop = hi if self.enrolled_to is None else self.enrolled_to
        return start <= lo and stop >= hi

    def problems(self, window: tuple[int, int]) -> list[str]:
        out = []
        if self.first_child_month is not None:
            lo, hi = window
            if not lo <= self.first_child_month <= hi:
                out.append(f"first_child_month {self.first_child_month} outside window {window}")
            derived = float(age_from_months(self.birth_year, self.first_child_month))
            if self.age_override is not None and abs(self.age_override - derived) > 1.0:
                out.append(f"age {self.age_override:.2f} inconsistent with birth year (derived {derived:.2f})")
        if (self.enrolled_from is not None and self.enrolled_to is not None
                and self.enrolled_from > self.enrolled_to):
            out.append("enrollment interval is empty")
        return out


@dataclass(frozen=True)
class SampleFilter:
    """Birth-cohort and age-at-first-birth restrictions applied before assembly."""

    birth_years: tuple[int, int] | None = (1985, 1995)
    age_range: tuple[float, float] | None = (20.0, 40.0)

    def reason(self, unit: UnitMeta) -> str | None:
        if self.birth_years is not None:
            a, b = self.birth_years
            if not a <= unit.birth_year <= b:
                return f"birth year {unit.birth_year} outside {self.birth_years}"
        age = unit.age_at_first_birth
        if self.age_range is not None and age is not None:
            a, b = self.age_range
            if not a <= age <= b:
                return f"age at first birth {age:.2f} outside {self.age_range}"
        return None


NO_FILTER = SampleFilter(birth_years=None, age_range=None)


@dataclass(frozen=True)
class ClaimTable:
    """Columnar claims: one entry per record, ``kind`` as ClaimKind values."""

    unit_id: np.ndarray
    month: np.ndarray
    kind: np.ndarray
    n_packages: np.ndarray
    pills: np.ndarray

    @classmethod
    def from_records(cls, records: Iterable[ClaimRecord]) -> "ClaimTable":
        records = list(records)
        return cls(
            unit_id=np.array([r.unit_id for r in records], dtype=object),
            month=np.array([r.calendar_month for r in records], dtype=np.int64),
            kind=np.array([r.kind.value for r in records], dtype=object),
            n_packages=np.array([r.n_packages or 0 for r in records], dtype=np.int64),
            pills=np.array([r.pills_per_package or 0 for r in records], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.month)

    def records(self) -> list[ClaimRecord]:
        out = []
        for u, m, k, p, q in zip(self.unit_id, self.month, self.kind, self.n_packages, self.pills):
            if k == "rx":
                out.append(ClaimRecord(str(u), int(m), ClaimKind.RX, int(p), int(q)))
            else:
                out.append(ClaimRecord(str(u), int(m), ClaimKind(k)))
        return out


@dataclass(frozen=True)
class PanelObservation:
    unit_id: str
    month: int
    y_rx: int
    y_psy: int
    y_gp: int
    group: int
    event_time: int | None
    age_at_first_birth: float


@dataclass(frozen=True, eq=False)
class Panel:
    """Wide-array panel: unit ``i`` by window month ``j``.

    ``outcomes`` maps an outcome name ('rx', 'psy', 'gp', optionally
    'first_rx') to an ``(n_units, n_months)`` array. ``observed`` marks months
    in which the unit was insured.
    """

    unit_ids: np.ndarray
    months: np.ndarray
    outcomes: Mapping[str, np.ndarray]
    observed: np.ndarray
    group: np.ndarray
    age: np.ndarray
    units: tuple[UnitMeta, ...]
    balanced: bool
    diagnostics: tuple[str, ...] = ()
    first_rx_month: np.ndarray | None = None
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for arr in (self.months, self.observed, self.group, self.age, *self.outcomes.values()):
            arr.setflags(write=False)

    @property
    def window(self) -> tuple[int, int]:
        return int(self.months[0]), int(self.months[-1])

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_months(self) -> int:
        return len(self.months)

    @property
    def treated_mask(self) -> np.ndarray:
        return self.group != NEVER

    def column(self, month: int) -> int:
        lo = int(self.months[0])
        j = month - lo
        if not 0 <= j < self.n_months:
            raise IndexError(f"month {month} outside window {self.window}")
        return j

    def treatment_indicator(self, delta: int = 0) -> np.ndarray:
        """D[i, tau] = 1{tau >= g - delta}; absorbing by construction."""
        g = np.where(self.treated_mask, self.group, np.iinfo(np.int64).max // 2)
        return self.months[None, :] >= (g - delta)[:, None]

    def event_time(self) -> np.ndarray:
        """Event time per cell; never-treated rows are NaN."""
        g = np.where(self.treated_mask, self.group, 0).astype(float)
        et = self.months[None, :] - g[:, None]
        et[~self.treated_mask] = np.nan
        return et

    def subset(self, mask: np.ndarray, note: str | None = None) -> "Panel":
        mask = np.asarray(mask, dtype=bool)
        diag = self.diagnostics + ((note,) if note else ())
        return Panel(
            unit_ids=self.unit_ids[mask],
            months=self.months.copy(),
            outcomes={k: v[mask].copy() for k, v in self.outcomes.items()},
            observed=self.observed[mask].copy(),
            group=self.group[mask].copy(),
            age=self.age[mask].copy(),
            units=tuple(u for u, keep in zip(self.units, mask) if keep),
            balanced=self.balanced,
            diagnostics=diag,
            first_rx_month=None if self.first_rx_month is None else self.first_rx_month[mask].copy(),
            covariates={k: v[mask].copy() for k, v in self.covariates.items()},
        )

    def with_outcome(self, name: str, values: np.ndarray) -> "Panel":
        outcomes = dict(self.outcomes)
        outcomes[name] = np.asarray(values)
        return replace(self, outcomes=outcomes)

    def observations(self) -> Iterable[PanelObservation]:
        et = self.event_time()
        for i in range(self.n_units):
            g = int(self.group[i])
            for j in np.flatnonzero(self.observed[i]):
                yield PanelObservation(
                    unit_id=str(self.unit_ids[i]),
                    month=int(self.months[j]),
                    y_rx=int(self.outcomes["rx"][i, j]),
                    y_psy=int(self.outcomes["psy"][i, j]),
                    y_gp=int(self.outcomes["gp"][i, j]),
                    group=g,
                    event_time=None if np.isnan(et[i, j]) else int(et[i, j]),
                    age_at_first_birth=float(self.age[i]),
                )

    def n_observations(self) -> int:
        return int(self.observed.sum())


def smooth_prescriptions(claims: Iterable[ClaimRecord | tuple[int, int, int]],
                         horizon: tuple[int, int]) -> np.ndarray:
    """0/1 consumption series over ``horizon`` (inclusive) for one unit.

    ``claims`` holds rx records or ``(month, n_packages, pills_per_package)``
    triples; visit records are ignored.
    """
    lo, hi = horizon
    starts, lengths = [], []
    for c in claims:
        if isinstance(c, ClaimRecord):
            if c.kind is not ClaimKind.RX:
                continue
            month, pk, pills = c.calendar_month, c.n_packages, c.pills_per_package
        else:
            month, pk, pills = c
        if pk < 1 or pills < 1:
            raise ValueError("rx purchases need at least one package of one pill")
        starts.append(month - lo)
        lengths.append(math.ceil(pk * pills / PILLS_PER_MONTH))
    n = len(starts)
    return kernels.smooth_batch(
        np.zeros(n, dtype=np.int64), np.asarray(starts, dtype=np.int64),
        np.asarray(lengths, dtype=np.int64), 1, hi - lo + 1,
    )[0]


def _as_table(claims) -> ClaimTable:
    if isinstance(claims, ClaimTable):
        return claims
    return ClaimTable.from_records(claims)


def build_panel(claims: ClaimTable | Iterable[ClaimRecord], units: Sequence[UnitMeta],
                window: tuple[int, int], balanced: bool = True,
                sample_filter: SampleFilter = NO_FILTER) -> Panel:
    """Assemble the long-format monthly panel (stored wide) from claims and unit metadata."""
    lo, hi = window
    if hi < lo:
        raise ValueError(f"empty window {window}")
    T = hi - lo + 1
    diagnostics: list[str] = []

    seen: dict[str, UnitMeta] = {}
    rejected: set[str] = set()
    for u in units:
        if u.unit_id in seen and seen[u.unit_id] != u:
            rejected.add(u.unit_id)
            diagnostics.append(f"unit {u.unit_id}: conflicting metadata records, rejected")
            continue
        seen[u.unit_id] = u
    kept: list[UnitMeta] = []
    for uid, u in seen.items():
        if uid in rejected:
            continue
        problems = u.problems(window)
        if problems:
            diagnostics.append(f"unit {uid}: " + "; ".join(problems) + ", rejected")
            continue
        why = sample_filter.reason(u)
        if why:
            diagnostics.append(f"unit {uid}: {why}, filtered")
            continue
        if balanced and not u.balanced_flag(window):
            diagnostics.append(f"unit {uid}: not observed in every month, dropped from balanced panel")
            continue
        kept.append(u)

    index = {u.unit_id: i for i, u in enumerate(kept)}
    n = len(kept)
    table = _as_table(claims)

    uidx = np.array([index.get(str(u), -1) for u in table.unit_id], dtype=np.int64)
    known = uidx >= 0
    n_unknown = int((~known).sum())
    if n_unknown:
        diagnostics.append(f"{n_unknown} claims reference units outside the panel, ignored")

    kind = table.kind
    rx = known & (kind == "rx")
    spell = -(-(table.n_packages[rx] * table.pills[rx]) // PILLS_PER_MONTH)
    y_rx = kernels.smooth_batch(uidx[rx], table.month[rx] - lo, spell.astype(np.int64), n, T)

    visits = {}
    for name in ("psy", "gp"):
        sel = known & (kind == name) & (table.month >= lo) & (table.month <= hi)
        counts = np.zeros((n, T), dtype=np.int64)
        np.add.at(counts, (uidx[sel], table.month[sel] - lo), 1)
        visits[name] = counts

    months = np.arange(lo, hi + 1, dtype=np.int64)
    observed = np.ones((n, T), dtype=bool)
    for i, u in enumerate(kept):
        a = lo if u.enrolled_from is None else max(lo, u.enrolled_from)
        b = hi if u.enrolled_to is None else min(hi, u.enrolled_to)
        observed[i] = (months >= a) & (months <= b)

    y_rx = np.where(observed, y_rx, 0).astype(np.uint8)
    for name in visits:
        visits[name] = np.where(observed, visits[name], 0)

    group = np.array([NEVER if u.first_child_month is None else u.first_child_month for u in kept],
                     dtype=np.int64)
    age = np.array([
        u.age_at_first_birth if u.treated else (np.nan if u.placebo_age is None else u.placebo_age)
        for u in kept
    ], dtype=np.float64)
    covariates = {
        "employed": np.array([u.employed_at_birth for u in kept], dtype=float),
        "subsidy": np.array([u.subsidy for u in kept], dtype=float),
        "cesarean": np.array([u.cesarean for u in kept], dtype=float),
        "birth_year": np.array([u.birth_year for u in kept], dtype=float),
    }
    for d in diagnostics:
        log.debug(d)
    return Panel(
        unit_ids=np.array([u.unit_id for u in kept], dtype=object),
        months=months,
        outcomes={"rx": y_rx, "psy": visits["psy"], "gp": visits["gp"]},
        observed=observed,
        group=group,
        age=age,
        units=tuple(kept),
        balanced=balanced,
        diagnostics=tuple(diagnostics),
        covariates=covariates,
    )


def fit_cohort_lognormal(units: Iterable[UnitMeta]) -> dict[int, tuple[float, float]]:
    """Per birth year, mean and sd of log age at first birth among treated units."""
    ages: dict[int, list[float]] = {}
    for u in units:
        if u.treated:
            ages.setdefault(u.birth_year, []).append(math.log(u.age_at_first_birth))
    out = {}
    for year, vals in sorted(ages.items()):
        v = np.asarray(vals)
        out[year] = (float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0)
    return out


@dataclass(frozen=True)
class PlaceboResult:
    units: tuple[UnitMeta, ...]
    unassigned: tuple[str, ...]
    diagnostics: tuple[str, ...]


def assign_placebo_births(units: Sequence[UnitMeta], cohort_params: Mapping[int, tuple[float, float]],
                          seed: int, window: tuple[int, int] | None = None,
                          max_retries: int = 50) -> PlaceboResult:
    """Draw placebo first-birth dates for never-treated units.

    Age comes from the cohort's log-normal, the calendar month uniformly from
    the twelve months of the implied year. Draws landing outside ``window``
    are redrawn; after ``max_retries`` the unit stays unassigned.
    """
    rng = np.random.default_rng(seed)
    out: list[UnitMeta] = []
    unassigned: list[str] = []
    diagnostics: list[str] = []
    for u in units:
        if u.treated:
            out.append(u)
            continue
        params = cohort_params.get(u.birth_year)
        if params is None:
            diagnostics.append(f"unit {u.unit_id}: no cohort parameters for {u.birth_year}, skipped")
            out.append(u)
            unassigned.append(u.unit_id)
            continue
        mu, sigma = params
        for _ in range(max_retries):
            age = float(np.exp(mu + sigma * rng.standard_normal()))
            moy = int(rng.integers(0, 12))
            month = (u.birth_year + int(math.floor(age)) - BASE_YEAR) * 12 + moy
            if window is None or window[0] <= month <= window[1]:
                out.append(replace(u, placebo_month=month, placebo_age=age))
                break
        else:
            diagnostics.append(f"unit {u.unit_id}: no in-window placebo draw after {max_retries} tries")
            out.append(u)
            unassigned.append(u.unit_id)
    return PlaceboResult(tuple(out), tuple(unassigned), tuple(diagnostics))


def first_prescription_filter(panel: Panel, washout_months: int = 12,
                              keep_never_prescribed: bool = False) -> Panel:
    """Keep units whose first observed prescription follows a clean washout.

    Adds a 'first_rx' outcome flagging the first-time prescription month.
    """
    if washout_months < 1:
        raise ValueError("washout_months must be >= 1")
    y = np.asarray(panel.outcomes["rx"]).astype(bool) & panel.observed
    has_rx = y.any(axis=1)
    first = np.where(has_rx, y.argmax(axis=1), -1)
    # observed months strictly before the first prescription
    cum_obs = np.cumsum(panel.observed, axis=1)
    before = np.where(has_rx, np.take_along_axis(cum_obs, np.maximum(first, 0)[:, None], 1)[:, 0]
                      - panel.observed[np.arange(panel.n_units), np.maximum(first, 0)], 0)
    keep = (has_rx & (before >= washout_months)) | (~has_rx & keep_never_prescribed)
    sub = panel.subset(keep, note=f"first-prescription filter (washout {washout_months}) kept {int(keep.sum())}")
    first_kept = first[keep]
    event = np.zeros((sub.n_units, sub.n_months), dtype=np.uint8)
    rows = np.flatnonzero(first_kept >= 0)
    event[rows, first_kept[rows]] = 1
    month = np.where(first_kept >= 0, first_kept + panel.months[0], -1)
    return replace(sub.with_outcome("first_rx", event), first_rx_month=month)


# ----------------------------------------------------------------------------- csv

CLAIMS_HEADER = ("unit_id", "calendar_month", "kind", "n_packages", "pills_per_package")
UNITS_HEADER = ("unit_id", "birth_year", "first_child_month", "employed", "subsidy", "cesarean")
ENROLLMENT_COLUMNS = ("enrolled_from", "enrolled_to")
PANEL_HEADER = ("unit_id", "month", "y_rx", "y_psy", "y_gp", "group", "event_time", "age_at_first_birth")


def _flag(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_claims_csv(path) -> ClaimTable:
    uid, month, kind, pk, pills = [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(CLAIMS_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            k = row["kind"].strip()
            if k not in ("rx", "psy", "gp"):
                raise ValueError(f"{path}:{line}: unknown kind {k!r}")
            p_txt, q_txt = row["n_packages"].strip(), row["pills_per_package"].strip()
            if k == "rx":
                if not p_txt or not q_txt or int(p_txt) < 1 or int(q_txt) < 1:
                    raise ValueError(f"{path}:{line}: rx claim needs positive package and pill counts")
                pk.append(int(p_txt))
                pills.append(int(q_txt))
            else:
                if p_txt or q_txt:
                    raise ValueError(f"{path}:{line}: visit claims carry no package fields")
                pk.append(0)
                pills.append(0)
            uid.append(row["unit_id"].strip())
            month.append(int(row["calendar_month"]))
            kind.append(k)
    return ClaimTable(np.array(uid, dtype=object), np.array(month, dtype=np.int64),
                      np.array(kind, dtype=object), np.array(pk, dtype=np.int64),
                      np.array(pills, dtype=np.int64))


def write_claims_csv(path, claims: ClaimTable):
    def rows():
        for u, m, k, p, q in zip(claims.unit_id, claims.month, claims.kind, claims.n_packages, claims.pills):
            if k == "rx":
                yield (u, int(m), k, int(p), int(q))
            else:
                yield (u, int(m), k, "", "")
    return atomic_write_csv(path, CLAIMS_HEADER, rows())


def read_units_csv(path) -> list[UnitMeta]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(UNITS_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            fcm = row["first_child_month"].strip()
            ef = (row.get("enrolled_from") or "").strip()
            et = (row.get("enrolled_to") or "").strip()
            out.append(UnitMeta(
                unit_id=row["unit_id"].strip(),
                birth_year=int(row["birth_year"]),
                first_child_month=int(fcm) if fcm else None,
                employed_at_birth=_flag(row["employed"]),
                subsidy=_flag(row["subsidy"]),
                cesarean=_flag(row["cesarean"]),
                enrolled_from=int(ef) if ef else None,
                enrolled_to=int(et) if et else None,
            ))
    return out


def write_units_csv(path, units: Sequence[UnitMeta]):
    partial = any(u.enrolled_from is not None or u.enrolled_to is not None for u in units)
    header = UNITS_HEADER + (ENROLLMENT_COLUMNS if partial else ())

    def rows():
        for u in units:
            row = [u.unit_id, u.birth_year, "" if u.first_child_month is None else u.first_child_month,
                   int(u.employed_at_birth), int(u.subsidy), int(u.cesarean)]
            if partial:
                row += ["" if u.enrolled_from is None else u.enrolled_from,
                        "" if u.enrolled_to is None else u.enrolled_to]
            yield row
    return atomic_write_csv(path, header, rows())


def write_panel_csv(path, panel: Panel):
    def rows():
        for ob in panel.observations():
            yield (ob.unit_id, ob.month, ob.y_rx, ob.y_psy, ob.y_gp,
                   "inf" if ob.group == NEVER else ob.group,
                   "" if ob.event_time is None else ob.event_time,
                   "" if np.isnan(ob.age_at_first_birth) else fmt(ob.age_at_first_birth))
    return atomic_write_csv(path, PANEL_HEADER, rows())
