import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from peerfx.core import (COURSE_COLUMNS, PANEL_COLUMNS, PERSON_BASE_COLUMNS, Dataset, FilterRules,
                         derive_month_group, derive_season, filter_estimation_sample, load_dataset,
                         month_group_codes, month_index, season_codes, write_dataset, CourseRecord)
from peerfx.errors import EmptySampleError, IntegrityError, LoadError


def _course(cid, provider=1, start=month_index(2010, 1), size=1, ptype="short"):
    return {"course_id": cid, "provider_id": provider, "start_month": int(start), "program_type": ptype,
            "target_occupation": 1, "competence_level": 1, "course_size": size,
            "planned_duration_months": 3.0, "weekly_hours": 30.0, "hours_practice": 100.0, "hours_class": 200.0}


def _person(pid, course_id=None):
    part = course_id is not None
    row = {c: "" for c in PERSON_BASE_COLUMNS}
    row.update(person_id=pid, role="participant" if part else "nonparticipant", entry_ue_month=100,
               course_id=course_id if part else "", ue_duration_at_start=4 if part else "",
               prior_program=0, same_firm_peer_flag=0, outcome_found_job_1y="" if part else 1)
    if part:
        row.update(search_duration_days=30, emp_days_60=900, log_total_earn_60=10.0, log_first_job_earn=7.5)
        row.update({c: 1 for c in PANEL_COLUMNS})
    row["age"] = 35
    return row


def _write(tmp_path, persons, courses):
    pp, cp = tmp_path / "persons.csv", tmp_path / "courses.csv"
    pd.DataFrame(persons).to_csv(pp, index=False)
    pd.DataFrame(courses, columns=list(COURSE_COLUMNS)).to_csv(cp, index=False)
    return pp, cp


def test_minimal_valid_input(tmp_path):
    pp, cp = _write(tmp_path, [_person(1, 10), _person(2)], [_course(10)])
    ds = load_dataset(pp, cp)
    assert len(ds.persons) == 2 and len(ds.courses) == 1
    assert ds.covariates == ("age",)
    assert ds.course(10).program_type == "short"
    assert ds.person(2).role == "nonparticipant"
    assert list(ds.course_members[10]) == [1]


def test_dangling_course_reference(tmp_path):
    pp, cp = _write(tmp_path, [_person(1, 99), _person(2)], [_course(10, size=0)])
    with pytest.raises(IntegrityError, match="99"):
        load_dataset(pp, cp)


def test_non_numeric_cell_names_row_and_column(tmp_path):
    p = _person(2)
    p["age"] = "abc"
    pp, cp = _write(tmp_path, [_person(1, 10), p], [_course(10)])
    with pytest.raises(LoadError, match=r"row 2.*'age'"):
        load_dataset(pp, cp)


def test_missing_column(tmp_path):
    pp, cp = _write(tmp_path, [_person(1, 10)], [_course(10)])
    frame = pd.read_csv(cp).drop(columns=["weekly_hours"])
    frame.to_csv(cp, index=False)
    with pytest.raises(LoadError, match="weekly_hours"):
        load_dataset(pp, cp)


def test_synthetic_round_trip(tmp_path, small_generated):
    ds, _ = small_generated
    write_dataset(ds, tmp_path / "p.csv", tmp_path / "c.csv", header="peerfx test")
    back = load_dataset(tmp_path / "p.csv", tmp_path / "c.csv")
    assert back.covariates == ds.covariates
    pd.testing.assert_frame_equal(back.persons, ds.persons, check_exact=False, rtol=1e-15)
    pd.testing.assert_frame_equal(back.courses, ds.courses)


@pytest.mark.parametrize("months", [(4, 8, 12), (1, 5), (1, 5, 9)])
def test_month_group_same_key(months):
    keys = {derive_month_group(CourseRecord(1, 3, int(month_index(2011, m)), "short", 1, 1)) for m in months}
    assert len(keys) == 1


def test_month_group_distinct_neighbours():
    a = derive_month_group(CourseRecord(1, 3, int(month_index(2011, 1)), "short", 1, 1))
    b = derive_month_group(CourseRecord(2, 3, int(month_index(2011, 2)), "short", 1, 1))
    assert a != b


@pytest.mark.parametrize("year,month,expected", [(2010, 3, (2010, 0)), (2010, 5, (2010, 1)), (2011, 12, (2011, 2))])
def test_season(year, month, expected):
    assert tuple(derive_season(CourseRecord(1, 1, int(month_index(year, month)), "short", 1, 1))) == expected


@given(st.integers(0, 500), st.integers(0, 400))
def test_vectorised_keys_match_scalar(provider, start):
    c = CourseRecord(1, provider, start, "short", 1, 1)
    g = derive_month_group(c)
    s = derive_season(c)
    assert month_group_codes([provider], [start])[0] == g.provider_id * 4 + g.group_index
    assert season_codes([start])[0] == s.year * 3 + s.third


def _mini_dataset(sizes, provider_of=None, same_firm=()):
    courses, persons = [], []
    pid = 1
    for cid, n in enumerate(sizes):
        prov = 1 if provider_of is None else provider_of[cid]
        courses.append(_course(cid, provider=prov, start=month_index(2010, 1) + 4 * (cid % 3), size=n))
        for _ in range(n):
            p = _person(pid, cid)
            p["same_firm_peer_flag"] = int(cid in same_firm)
            persons.append(p)
            pid += 1
    persons.append(_person(pid))
    frame = pd.DataFrame(persons)
    for col in frame.columns:
        if col != "role":
            frame[col] = pd.to_numeric(frame[col], errors="coerce")
    from peerfx.core import normalize_courses, normalize_persons

    return Dataset(normalize_persons(frame, ("age",)), normalize_courses(pd.DataFrame(courses)), ("age",))


def test_small_course_dropped():
    ds = _mini_dataset([4, 6, 7])
    out = filter_estimation_sample(ds)
    assert set(out.courses["course_id"]) == {1, 2}


def test_filter_identity_on_valid_dataset():
    ds = _mini_dataset([6, 7, 8])
    out = filter_estimation_sample(ds, FilterRules())
    assert out.equals(filter_estimation_sample(out))
    assert len(out.participants) == len(ds.participants)


def test_same_firm_exclusion():
    sizes = [5, 6, 7, 8, 9, 10, 11, 12, 13, 14]
    ds = _mini_dataset(sizes, same_firm=(3,))
    out = filter_estimation_sample(ds, FilterRules(exclude_same_firm=True))
    assert len(out.courses) == 9
    assert len(out.participants) == sum(sizes) - sizes[3]


def test_empty_sample():
    with pytest.raises(EmptySampleError):
        filter_estimation_sample(_mini_dataset([3, 4]))


def test_provider_without_month_group_pair_dropped():
    # provider 2 has one course only, so no month group with two courses
    ds = _mini_dataset([6, 6, 6, 6], provider_of=[1, 1, 1, 2])
    out = filter_estimation_sample(ds)
    assert set(out.courses["provider_id"]) == {1}
