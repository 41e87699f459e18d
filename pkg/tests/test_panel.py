from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import first_rx_scan, naive_panel_rows, smooth_oracle
from penaltydid import _kernels_py
from penaltydid._backend import get_kernels
from penaltydid.panel import (NEVER, PANEL_HEADER, ClaimKind, ClaimRecord, ClaimTable, SampleFilter, UnitMeta,
                              age_from_months, assign_placebo_births, build_panel, first_prescription_filter,
                              fit_cohort_lognormal, read_claims_csv, read_units_csv, smooth_prescriptions,
                              write_claims_csv, write_panel_csv, write_units_csv)

# (purchases as (month, packages, pills), expected months 0..11); worked out by hand
SMOOTHING_TABLE = [
    ("empty", [], "000000000000"),
    ("one 30-pill package", [(5, 1, 30)], "000001000000"),
    ("three packages", [(2, 3, 30)], "001110000000"),
    ("one-month gap", [(5, 1, 30), (7, 1, 30)], "000001110000"),
    ("two-month gap", [(3, 1, 30), (6, 1, 30)], "000111100000"),
    ("three-month gap stays", [(2, 1, 30), (6, 1, 30)], "001000100000"),
    ("31 pills round up", [(4, 1, 31)], "000011000000"),
    ("spell clipped at end", [(10, 2, 30)], "000000000011"),
    ("long spell clipped at end", [(10, 4, 30)], "000000000011"),
    ("29 pills is one month", [(0, 1, 29)], "100000000000"),
    ("two half packages", [(3, 2, 15)], "000100000000"),
    ("60-pill package", [(3, 1, 60)], "000110000000"),
    ("overlap is a union", [(2, 3, 30), (3, 1, 30)], "001110000000"),
    ("duplicate purchase", [(4, 1, 30), (4, 1, 30)], "000010000000"),
    ("extension then two-month gap", [(1, 2, 30), (5, 1, 30)], "011111000000"),
    ("gaps of one and two", [(0, 1, 30), (2, 1, 30), (5, 1, 30)], "111111000000"),
    ("gaps filled independently", [(0, 1, 30), (3, 1, 30), (7, 1, 30)], "111100010000"),
    ("spell starting before window", [(-1, 3, 30)], "110000000000"),
    ("no fill across window start", [(-2, 1, 30), (1, 1, 30)], "010000000000"),
    ("last month", [(11, 1, 30)], "000000000001"),
    ("gap before last month", [(9, 1, 30), (11, 1, 30)], "000000000111"),
    ("two-package spell then gap", [(0, 2, 30), (4, 1, 30)], "111110000000"),
    ("gap before multi-package spell", [(1, 1, 30), (3, 2, 30)], "011110000000"),
    ("90 pills then one-pill purchase", [(6, 1, 90), (10, 1, 1)], "000000111110"),
    ("98 pills is four months", [(0, 7, 14)], "111100000000"),
]


def _bits(s):
    return np.array([int(c) for c in s], dtype=np.uint8)


@pytest.mark.parametrize("name,purchases,expected", SMOOTHING_TABLE, ids=[c[0] for c in SMOOTHING_TABLE])
def test_smoothing_table(name, purchases, expected):
    got = smooth_prescriptions(purchases, (0, 11))
    np.testing.assert_array_equal(got, _bits(expected))
    assert smooth_oracle(purchases, 12) == [int(c) for c in expected]


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_smoothing_table_batched(backend):
    k = get_kernels(backend)
    unit, start, length = [], [], []
    for i, (_, purchases, _) in enumerate(SMOOTHING_TABLE):
        for m, p, q in purchases:
            unit.append(i)
            start.append(m)
            length.append(math.ceil(p * q / 30))
    out = k.smooth_batch(np.array(unit, dtype=np.int64), np.array(start, dtype=np.int64),
                         np.array(length, dtype=np.int64), len(SMOOTHING_TABLE), 12)
    expected = np.array([_bits(c[2]) for c in SMOOTHING_TABLE])
    np.testing.assert_array_equal(np.asarray(out), expected)


def test_smoothing_from_records_ignores_visits():
    claims = [ClaimRecord("a", 12, ClaimKind.RX, 1, 30), ClaimRecord("a", 13, ClaimKind.GP)]
    got = smooth_prescriptions(claims, (10, 15))
    np.testing.assert_array_equal(got, [0, 0, 1, 0, 0, 0])


purchase = st.tuples(st.integers(-3, 25), st.integers(1, 4), st.sampled_from([10, 14, 28, 30, 31, 60, 90]))


@settings(max_examples=200, deadline=None)
@given(st.lists(purchase, max_size=8), st.integers(1, 24))
def test_smoothing_matches_oracle(purchases, horizon):
    got = smooth_prescriptions(purchases, (0, horizon - 1))
    assert got.tolist() == smooth_oracle(purchases, horizon)


@settings(max_examples=200, deadline=None)
@given(st.lists(purchase, max_size=8))
def test_smoothing_monotone_and_idempotent(purchases):
    horizon = 24
    s = smooth_prescriptions(purchases, (0, horizon - 1))
    for m, _, _ in purchases:
        if 0 <= m < horizon:
            assert s[m] == 1
    again = _kernels_py.smooth_batch(np.zeros(int(s.sum()), dtype=np.int64), np.flatnonzero(s).astype(np.int64),
                                     np.ones(int(s.sum()), dtype=np.int64), 1, horizon)[0]
    np.testing.assert_array_equal(again, s)


def test_claim_record_validation():
    with pytest.raises(ValueError):
        ClaimRecord("a", 0, "rx")
    with pytest.raises(ValueError):
        ClaimRecord("a", 0, "rx", 0, 30)
    with pytest.raises(ValueError):
        ClaimRecord("a", 0, "gp", 1, 30)
    assert ClaimRecord("a", 0, "rx", 3, 31).spell_months == 4


def test_age_convention():
    # born 1990 (mid-year) -> month of July 1990 is -234; 30 years later is month 126
    assert age_from_months(1990, 126) == pytest.approx(30.0)
    u = UnitMeta("a", 1990, 126)
    assert u.age_at_first_birth == pytest.approx(30.0)


# ----------------------------------------------------------------------------- build_panel

def test_one_unit_no_claims():
    p = build_panel([], [UnitMeta("a", 1990)], (0, 2))
    obs = list(p.observations())
    assert len(obs) == 3
    assert all(o.y_rx == 0 and o.y_psy == 0 and o.y_gp == 0 for o in obs)
    assert obs[0].group == NEVER and obs[0].event_time is None


def test_partially_observed_unit_dropped_when_balanced():
    units = [UnitMeta("a", 1990, enrolled_from=0, enrolled_to=5), UnitMeta("b", 1990)]
    p = build_panel([], units, (0, 11), balanced=True)
    assert list(p.unit_ids) == ["b"]
    assert any("dropped" in d for d in p.diagnostics)
    q = build_panel([], units, (0, 11), balanced=False)
    assert q.n_observations() == 6 + 12


def _fixture(rng, n_units=10, window=(0, 23)):
    lo, hi = window
    units, claims = [], []
    for i in range(n_units):
        g = int(rng.integers(lo + 3, hi)) if rng.random() < 0.7 else None
        by = 1990 if g is None else int(round(2010 + (g - 6) / 12 - 29))
        ef = int(rng.integers(lo, lo + 5)) if rng.random() < 0.3 else None
        et = int(rng.integers(hi - 5, hi + 1)) if rng.random() < 0.3 else None
        units.append(UnitMeta(f"u{i}", by, g, enrolled_from=ef, enrolled_to=et))
        for _ in range(int(rng.integers(0, 6))):
            claims.append(ClaimRecord(f"u{i}", int(rng.integers(lo - 2, hi + 1)), ClaimKind.RX,
                                      int(rng.integers(1, 3)), int(rng.choice([28, 30, 60]))))
        for _ in range(int(rng.integers(0, 8))):
            kind = ClaimKind.PSY if rng.random() < 0.3 else ClaimKind.GP
            claims.append(ClaimRecord(f"u{i}", int(rng.integers(lo, hi + 1)), kind))
    return units, claims


@pytest.mark.parametrize("balanced", [True, False])
@pytest.mark.parametrize("seed", range(4))
def test_build_panel_matches_naive_builder(seed, balanced):
    rng = np.random.default_rng(seed)
    units, claims = _fixture(rng)
    window = (0, 23)
    panel = build_panel(claims, units, window, balanced=balanced)
    ref = naive_panel_rows(claims, units, window, balanced=balanced)

    got = {}
    for o in panel.observations():
        g = None if o.group == NEVER else o.group
        got[(o.unit_id, o.month)] = (o.y_rx, o.y_psy, o.y_gp, g, o.event_time)
    assert set(got) == set(ref)
    assert got == ref


def test_visits_sum_and_rejections():
    units = [UnitMeta("a", 1990, 10), UnitMeta("b", 1990), UnitMeta("b", 1991),
             UnitMeta("c", 1990, 10, age_override=35.0)]
    claims = [ClaimRecord("a", 3, ClaimKind.GP), ClaimRecord("a", 3, ClaimKind.GP), ClaimRecord("a", 3, ClaimKind.PSY)]
    p = build_panel(claims, units, (0, 11))
    assert list(p.unit_ids) == ["a"]
    assert p.outcomes["gp"][0, 3] == 2 and p.outcomes["psy"][0, 3] == 1
    text = " ".join(p.diagnostics)
    assert "b: conflicting" in text and "c: age" in text


def test_sample_filter():
    units = [UnitMeta("old", 1980, 60), UnitMeta("young", 1995, 60), UnitMeta("ok", 1985, 60)]
    p = build_panel([], units, (0, 100), sample_filter=SampleFilter())
    # 1995 birth year gives age 14.5 at month 60; 1980 is outside the cohort range
    assert list(p.unit_ids) == ["ok"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.none(), st.integers(0, 11)), min_size=1, max_size=8), st.integers(0, 9))
def test_absorbing_and_rectangular(groups, delta):
    units = [UnitMeta(f"u{i}", 1990, g) for i, g in enumerate(groups)]
    p = build_panel([], units, (0, 11))
    d = p.treatment_indicator(delta)
    assert (np.diff(d.astype(int), axis=1) >= 0).all()
    assert p.n_observations() == p.n_units * p.n_months
    assert all(g == NEVER or 0 <= g <= 11 for g in p.group)


# ----------------------------------------------------------------------------- placebo births

def test_placebo_sigma_zero_and_determinism():
    units = [UnitMeta(f"n{i}", 1990) for i in range(20)] + [UnitMeta("t", 1990, 120)]
    params = {1990: (math.log(29.0), 0.0)}
    a = assign_placebo_births(units, params, seed=7)
    b = assign_placebo_births(units, params, seed=7)
    assert a == b
    for u in a.units[:-1]:
        assert u.placebo_age == pytest.approx(29.0, abs=1e-12)
        assert (1990 + 29 - 2010) * 12 <= u.placebo_month < (1990 + 30 - 2010) * 12
    assert a.units[-1] is units[-1]


def test_placebo_mean_age_matches_fitted_cohort():
    from penaltydid.simgen import DgpConfig, simulate_panel

    # simulated mothers (mean age about 29) pooled into one cohort
    sim = simulate_panel(DgpConfig(n_units=3000, never_treated_share=0.0, seed=3))
    pooled = [UnitMeta(u.unit_id, 2000, u.first_child_month, age_override=u.age_at_first_birth) for u in sim.units]
    params = fit_cohort_lognormal(pooled)
    never = [UnitMeta(f"n{i}", 2000) for i in range(10_000)]
    res = assign_placebo_births(never, params, seed=1)
    ages = np.array([u.placebo_age for u in res.units])
    assert abs(ages.mean() - 29.0) < 0.5


def test_placebo_missing_params_and_retry_exhaustion():
    units = [UnitMeta("x", 1970), UnitMeta("y", 1990)]
    res = assign_placebo_births(units, {1990: (math.log(29.0), 0.0)}, seed=0, window=(0, 10), max_retries=5)
    assert res.unassigned == ("x", "y")
    assert any("no cohort parameters" in d for d in res.diagnostics)
    assert any("after 5 tries" in d for d in res.diagnostics)


# ----------------------------------------------------------------------------- first prescriptions

def _rx_panel(rows, observed=None):
    from conftest import make_panel

    return make_panel(np.array(rows), [None] * len(rows), observed=observed)


def test_first_rx_in_first_month_excluded():
    y = np.zeros((2, 30))
    y[0, 0] = 1
    y[1, 20] = 1
    out = first_prescription_filter(_rx_panel(y), washout_months=12)
    assert list(out.unit_ids) == ["u1"]
    assert out.first_rx_month.tolist() == [20]
    assert out.outcomes["first_rx"][0].tolist() == [int(j == 20) for j in range(30)]


def test_first_rx_matches_scan(rng):
    y = (rng.random((50, 40)) < 0.03).astype(float)
    obs = np.ones((50, 40), dtype=bool)
    for i in range(50):
        if rng.random() < 0.4:
            obs[i, : int(rng.integers(1, 15))] = False
    y = y * obs
    panel = _rx_panel(y, observed=obs)
    for washout in (1, 6, 12):
        out = first_prescription_filter(panel, washout)
        ref = first_rx_scan(y.tolist(), obs.tolist(), washout)
        assert [f"u{i}" for i, _ in ref] == list(out.unit_ids)
        assert [f for _, f in ref] == out.first_rx_month.tolist()


# ----------------------------------------------------------------------------- csv

def test_csv_round_trip(tmp_path, rng):
    units, claims = _fixture(rng)
    table = ClaimTable.from_records(claims)
    write_claims_csv(tmp_path / "claims.csv", table)
    write_units_csv(tmp_path / "units.csv", units)
    back = read_claims_csv(tmp_path / "claims.csv")
    assert back.records() == table.records()
    assert read_units_csv(tmp_path / "units.csv") == units
    panel = build_panel(back, units, (0, 23), balanced=False)
    write_panel_csv(tmp_path / "panel.csv", panel)
    with open(tmp_path / "panel.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == PANEL_HEADER
    assert len(rows) - 1 == panel.n_observations()
    never_rows = [r for r in rows[1:] if r[5] == "inf"]
    assert all(r[6] == "" for r in never_rows)


def test_claims_csv_rejects_bad_rows(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("unit_id,calendar_month,kind,n_packages,pills_per_package\na,1,gp,1,30\n")
    with pytest.raises(ValueError, match="visit claims"):
        read_claims_csv(path)
    path.write_text("unit_id,calendar_month,kind\na,1,gp\n")
    with pytest.raises(ValueError, match="missing columns"):
        read_claims_csv(path)
