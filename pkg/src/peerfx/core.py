"""Dataset schema, derived calendar keys, CSV I/O and sample filters.

Calendar months are plain integers counting months since January 2000
(``0`` is January 2000, ``12`` is January 2001).  Everything downstream works
on two pandas frames, one row per person and one row per course.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd

from .errors import EmptySampleError, IntegrityError, LoadError

EPOCH_YEAR = 2000
N_PANEL_MONTHS = 60
MAX_EMP_DAYS = 1826

ROLES = ("participant", "nonparticipant")
PROGRAM_TYPES = ("short", "long", "retraining")

PANEL_COLUMNS = tuple(f"employed_m{m}" for m in range(1, N_PANEL_MONTHS + 1))
PERSON_BASE_COLUMNS = (
    "person_id",
    "role",
    "entry_ue_month",
    "course_id",
    "ue_duration_at_start",
    "prior_program",
    "same_firm_peer_flag",
    "outcome_found_job_1y",
    "search_duration_days",
    "emp_days_60",
    "log_total_earn_60",
    "log_first_job_earn",
) + PANEL_COLUMNS
OUTCOME_COLUMNS = ("search_duration_days", "emp_days_60", "log_total_earn_60", "log_first_job_earn")
# columns the scoring stage appends; never treated as covariates
SCORE_COLUMNS = ("p_score", "employability")

COURSE_COLUMNS = (
    "course_id",
    "provider_id",
    "start_month",
    "program_type",
    "target_occupation",
    "competence_level",
    "course_size",
    "planned_duration_months",
    "weekly_hours",
    "hours_practice",
    "hours_class",
)
COURSE_CONTROLS = ("course_size", "planned_duration_months", "weekly_hours", "hours_practice", "hours_class")

CORE_COVARIATES = (
    "age",
    "female",
    "non_german",
    "highschool",
    "voc_training",
    "academic",
    "months_employed_2y",
    "months_employed_10y",
    "earnings_2y",
)


# ---------------------------------------------------------------------------
# calendar keys
# ---------------------------------------------------------------------------

def month_index(year, month):
    """Integer month index of a calendar ``year`` and ``month`` (1-12)."""
    return (np.asarray(year) - EPOCH_YEAR) * 12 + (np.asarray(month) - 1)


def year_of(m):
    return EPOCH_YEAR + np.floor_divide(m, 12)


def month_of_year(m):
    return np.mod(m, 12) + 1


class MonthGroupKey(NamedTuple):
    provider_id: int
    group_index: int


class SeasonKey(NamedTuple):
    year: int
    third: int


def derive_month_group(course) -> MonthGroupKey:
    """Provider-specific month group of a course.

    Courses at one provider whose start months lie a multiple of four months
    apart share a key; with a January epoch this puts January, May and
    September in group 0.
    """
    return MonthGroupKey(int(course.provider_id), int(np.mod(course.start_month, 4)))


def derive_season(course) -> SeasonKey:
    """Four-month division (Jan-Apr, May-Aug, Sep-Dec) of the start month."""
    m = int(course.start_month)
    return SeasonKey(int(year_of(m)), int((month_of_year(m) - 1) // 4))


def month_group_codes(provider_id, start_month):
    """Vectorised month-group key encoded as ``provider_id * 4 + group``."""
    return np.asarray(provider_id, dtype=np.int64) * 4 + np.mod(np.asarray(start_month, dtype=np.int64), 4)


def season_codes(start_month):
    """Vectorised season key encoded as ``year * 3 + third``."""
    m = np.asarray(start_month, dtype=np.int64)
    return year_of(m) * 3 + (month_of_year(m) - 1) // 4


# ---------------------------------------------------------------------------
# records and dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PersonRecord:
    person_id: int
    role: str
    entry_ue_month: int
    covariates: dict
    ue_duration_at_start: Optional[float] = None
    course_id: Optional[int] = None
    prior_program: int = 0
    same_firm_peer_flag: int = 0
    outcome_found_job_1y: Optional[int] = None
    outcomes: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CourseRecord:
    course_id: int
    provider_id: int
    start_month: int
    program_type: str
    target_occupation: int
    competence_level: int
    controls_W: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Dataset:
    """Immutable pair of person and course tables.

    ``persons`` carries :data:`PERSON_BASE_COLUMNS`, then the covariates named
    in ``covariates``, then any :data:`SCORE_COLUMNS` attached by scoring.
    """

    persons: pd.DataFrame
    courses: pd.DataFrame
    covariates: tuple

    @property
    def participants(self) -> pd.DataFrame:
        return self.persons[self.persons["role"] == "participant"]

    @property
    def nonparticipants(self) -> pd.DataFrame:
        return self.persons[self.persons["role"] == "nonparticipant"]

    @cached_property
    def course_members(self) -> dict:
        """course_id -> array of participant person_ids."""
        p = self.participants
        return {int(c): g.to_numpy() for c, g in p.groupby("course_id")["person_id"]}

    @cached_property
    def provider_courses(self) -> dict:
        """provider_id -> array of course_ids."""
        return {int(pid): g.to_numpy() for pid, g in self.courses.groupby("provider_id")["course_id"]}

    def person(self, person_id) -> PersonRecord:
        row = self.persons.loc[self.persons["person_id"] == person_id].iloc[0]
        outcomes = {c: row[c] for c in OUTCOME_COLUMNS + PANEL_COLUMNS}
        found = row["outcome_found_job_1y"]
        return PersonRecord(
            person_id=int(row["person_id"]),
            role=row["role"],
            entry_ue_month=int(row["entry_ue_month"]),
            covariates={c: float(row[c]) for c in self.covariates},
            ue_duration_at_start=None if pd.isna(row["ue_duration_at_start"]) else float(row["ue_duration_at_start"]),
            course_id=None if pd.isna(row["course_id"]) else int(row["course_id"]),
            prior_program=int(row["prior_program"]),
            same_firm_peer_flag=int(row["same_firm_peer_flag"]),
            outcome_found_job_1y=None if pd.isna(found) else int(found),
            outcomes=outcomes,
        )

    def course(self, course_id) -> CourseRecord:
        row = self.courses.loc[self.courses["course_id"] == course_id].iloc[0]
        return CourseRecord(
            course_id=int(row["course_id"]),
            provider_id=int(row["provider_id"]),
            start_month=int(row["start_month"]),
            program_type=row["program_type"],
            target_occupation=int(row["target_occupation"]),
            competence_level=int(row["competence_level"]),
            controls_W={c: float(row[c]) for c in COURSE_CONTROLS},
        )

    def with_persons(self, persons: pd.DataFrame) -> "Dataset":
        return dataclasses.replace(self, persons=persons)

    def with_scores(self, scores: pd.Series, name: str = "employability") -> "Dataset":
        """Attach a score column keyed by person_id (missing persons get NaN)."""
        persons = self.persons.drop(columns=[name], errors="ignore")
        mapped = persons["person_id"].map(scores)
        persons = persons.assign(**{name: mapped.astype(float)})
        return self.with_persons(persons)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.covariates == other.covariates
            and self.persons.equals(other.persons)
            and self.courses.equals(other.courses)
        )


# ---------------------------------------------------------------------------
# normalisation and validation
# ---------------------------------------------------------------------------

_PERSON_INT = ("person_id", "entry_ue_month", "prior_program", "same_firm_peer_flag")
_PERSON_NULLABLE_INT = ("course_id",)
_COURSE_INT = ("course_id", "provider_id", "start_month", "target_occupation", "competence_level", "course_size")


def normalize_persons(persons: pd.DataFrame, covariates) -> pd.DataFrame:
    """Column order and dtypes shared by the generator and the loader."""
    extra = [c for c in SCORE_COLUMNS if c in persons.columns]
    out = persons.loc[:, list(PERSON_BASE_COLUMNS) + list(covariates) + extra].copy()
    for c in _PERSON_INT:
        out[c] = out[c].astype(np.int64)
    out["course_id"] = out["course_id"].astype("Int64")
    out["role"] = out["role"].astype(str)
    float_cols = [c for c in out.columns if c not in _PERSON_INT + _PERSON_NULLABLE_INT + ("role",)]
    for c in float_cols:
        out[c] = out[c].astype(np.float64)
    return out.reset_index(drop=True)


def normalize_courses(courses: pd.DataFrame) -> pd.DataFrame:
    out = courses.loc[:, list(COURSE_COLUMNS)].copy()
    for c in _COURSE_INT:
        out[c] = out[c].astype(np.int64)
    out["program_type"] = out["program_type"].astype(str)
    for c in COURSE_CONTROLS:
        if c != "course_size":
            out[c] = out[c].astype(np.float64)
    return out.reset_index(drop=True)


def validate(ds: Dataset, check_sizes: bool = True) -> None:
    """Check the record-level and cross-record invariants.

    Raises
    ------
    IntegrityError
    """
    p, c = ds.persons, ds.courses
    if p["person_id"].duplicated().any():
        dup = p.loc[p["person_id"].duplicated(), "person_id"].iloc[0]
        raise IntegrityError(f"duplicate person_id {dup}")
    if c["course_id"].duplicated().any():
        dup = c.loc[c["course_id"].duplicated(), "course_id"].iloc[0]
        raise IntegrityError(f"duplicate course_id {dup}")
    bad_role = ~p["role"].isin(ROLES)
    if bad_role.any():
        i = int(np.flatnonzero(bad_role)[0])
        raise IntegrityError(f"row {i + 1}: role must be one of {ROLES}, got {p['role'].iloc[i]!r}")
    bad_type = ~c["program_type"].isin(PROGRAM_TYPES)
    if bad_type.any():
        i = int(np.flatnonzero(bad_type)[0])
        raise IntegrityError(f"courses row {i + 1}: unknown program_type {c['program_type'].iloc[i]!r}")
    part = (p["role"] == "participant").to_numpy()
    has_course = p["course_id"].notna().to_numpy()
    has_found = p["outcome_found_job_1y"].notna().to_numpy()
    mismatch = np.flatnonzero(part != has_course)
    if mismatch.size:
        i = int(mismatch[0])
        raise IntegrityError(f"row {i + 1}: participants need a course_id and non-participants must not have one")
    mismatch = np.flatnonzero(part == has_found)
    if mismatch.size:
        i = int(mismatch[0])
        raise IntegrityError(
            f"row {i + 1}: outcome_found_job_1y must be present exactly for non-participants")
    known = set(c["course_id"].tolist())
    refs = p.loc[part, "course_id"].astype(np.int64)
    dangling = ~refs.isin(known)
    if dangling.any():
        raise IntegrityError(f"participant references unknown course_id {int(refs[dangling].iloc[0])}")
    found = p.loc[~part, "outcome_found_job_1y"]
    if not found.isin([0.0, 1.0]).all():
        raise IntegrityError("outcome_found_job_1y must be 0 or 1")
    panel = p.loc[part, list(PANEL_COLUMNS)].to_numpy()
    if not np.isin(panel[~np.isnan(panel)], (0.0, 1.0)).all():
        raise IntegrityError("employed_m* entries must be 0 or 1")
    emp = p.loc[part, "emp_days_60"].dropna()
    if ((emp < 0) | (emp > MAX_EMP_DAYS)).any():
        raise IntegrityError(f"emp_days_60 must lie in [0, {MAX_EMP_DAYS}]")
    for flag in ("prior_program", "same_firm_peer_flag"):
        if not p[flag].isin([0, 1]).all():
            raise IntegrityError(f"{flag} must be 0 or 1")
    if check_sizes:
        counts = refs.value_counts()
        stored = c.set_index("course_id")["course_size"]
        actual = counts.reindex(stored.index, fill_value=0)
        off = stored != actual
        if off.any():
            cid = int(stored.index[off.to_numpy()][0])
            raise IntegrityError(
                f"course {cid}: course_size {int(stored[cid])} != participant count {int(actual[cid])}")


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _read_csv(path, label):
    try:
        return pd.read_csv(path, comment="#", dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise LoadError(f"{label}: cannot read {path}: {exc}") from exc


def _parse_numeric(frame, columns, label, required=()):
    out = {}
    for col in columns:
        raw = frame[col].str.strip()
        empty = raw == ""
        num = pd.to_numeric(raw.where(~empty, None), errors="coerce")
        bad = num.isna() & ~empty
        if bad.any():
            i = int(np.flatnonzero(bad.to_numpy())[0])
            raise LoadError(f"{label} row {i + 1}, column {col!r}: non-numeric value {frame[col].iloc[i]!r}")
        if col in required and empty.any():
            i = int(np.flatnonzero(empty.to_numpy())[0])
            raise LoadError(f"{label} row {i + 1}, column {col!r}: missing value")
        out[col] = num.astype(float)
    return out


def load_dataset(persons_path, courses_path) -> Dataset:
    """Read and validate the two CSV files.

    Covariates are every persons column after ``employed_m60`` other than the
    score columns.

    Raises
    ------
    LoadError
        Missing column or non-numeric cell (message names row and column).
    IntegrityError
        Cross-record invariant violated.
    """
    praw = _read_csv(persons_path, "persons")
    craw = _read_csv(courses_path, "courses")
    for label, frame, cols in (("persons", praw, PERSON_BASE_COLUMNS), ("courses", craw, COURSE_COLUMNS)):
        missing = [col for col in cols if col not in frame.columns]
        if missing:
            raise LoadError(f"{label}: missing column(s) {missing}")
    covariates = tuple(c for c in praw.columns if c not in PERSON_BASE_COLUMNS and c not in SCORE_COLUMNS)
    scores = tuple(c for c in SCORE_COLUMNS if c in praw.columns)
    numeric = [c for c in PERSON_BASE_COLUMNS if c != "role"] + list(covariates) + list(scores)
    parsed = _parse_numeric(
        praw, numeric, "persons",
        required=("person_id", "entry_ue_month", "prior_program", "same_firm_peer_flag") + covariates)
    persons = pd.DataFrame(parsed)
    persons.insert(1, "role", praw["role"].str.strip())
    cparsed = _parse_numeric(
        craw, [c for c in COURSE_COLUMNS if c != "program_type"], "courses",
        required=tuple(c for c in COURSE_COLUMNS if c != "program_type"))
    courses = pd.DataFrame(cparsed)
    courses.insert(3, "program_type", craw["program_type"].str.strip())
    ds = Dataset(normalize_persons(persons, covariates), normalize_courses(courses), covariates)
    validate(ds)
    return ds


def write_dataset(ds: Dataset, persons_path, courses_path, header: Optional[str] = None) -> None:
    """Write both tables; ``header`` becomes a leading ``#`` comment line."""
    for frame, path in ((ds.persons, persons_path), (ds.courses, courses_path)):
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            frame.to_csv(fh, index=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# estimation-sample filters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterRules:
    min_course_size: int = 5
    max_course_size: int = 30
    min_courses_per_group: int = 2
    exclude_prior_program: bool = False
    exclude_same_firm: bool = False
    require_monthly_offer: bool = False


def _filter_pass(persons, courses, rules):
    part = persons["role"] == "participant"
    sizes = persons.loc[part, "course_id"].value_counts()
    courses = courses.assign(course_size=courses["course_id"].map(sizes).fillna(0).astype(np.int64))
    ok = courses["course_size"].between(rules.min_course_size, rules.max_course_size)
    courses = courses[ok]

    mg = month_group_codes(courses["provider_id"], courses["start_month"])
    per_group = pd.Series(mg).value_counts()
    good_groups = per_group[per_group >= rules.min_courses_per_group].index
    good_providers = set((good_groups // 4).tolist())
    courses = courses[courses["provider_id"].isin(good_providers)]

    if rules.require_monthly_offer:
        keep = []
        for pid, g in courses.groupby("provider_id"):
            months = np.unique(g["start_month"].to_numpy())
            if months[-1] - months[0] + 1 == months.size:
                keep.append(pid)
        courses = courses[courses["provider_id"].isin(keep)]

    if rules.exclude_same_firm:
        flagged = persons.loc[part & (persons["same_firm_peer_flag"] == 1), "course_id"].unique()
        courses = courses[~courses["course_id"].isin(np.asarray(flagged, dtype=np.int64))]

    keep_person = ~part | persons["course_id"].isin(courses["course_id"])
    if rules.exclude_prior_program:
        keep_person &= ~(part & (persons["prior_program"] == 1))
    persons = persons[keep_person]

    part = persons["role"] == "participant"
    sizes = persons.loc[part, "course_id"].value_counts()
    courses = courses.assign(course_size=courses["course_id"].map(sizes).fillna(0).astype(np.int64))
    return persons, courses


def filter_estimation_sample(ds: Dataset, rules: FilterRules = FilterRules()) -> Dataset:
    """Apply the sample restrictions, repeating until nothing changes.

    Each pass keeps courses with size in ``[min_course_size,
    max_course_size]``, then providers having at least
    ``min_courses_per_group`` courses in one month group, optionally drops
    courses with a same-firm flag and participants with a prior program, and
    finally recomputes ``course_size``.  Iterating to the fixed point makes
    the filter idempotent.

    Raises
    ------
    EmptySampleError
        No participant survives.
    """
    persons, courses = ds.persons, ds.courses
    while True:
        new_p, new_c = _filter_pass(persons, courses, rules)
        if len(new_p) == len(persons) and len(new_c) == len(courses) and new_c["course_size"].equals(
                courses["course_size"]):
            break
        persons, courses = new_p, new_c
    if not (persons["role"] == "participant").any():
        raise EmptySampleError("no participants left after filtering")
    out = Dataset(normalize_persons(persons, ds.covariates), normalize_courses(courses), ds.covariates)
    validate(out)
    return out
