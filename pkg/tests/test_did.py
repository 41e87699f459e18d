from __future__ import annotations

import numpy as np
import pytest
from conftest import make_panel
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cell_mean_did, textbook_dr_did
from penaltydid.did import (CellSkipped, DidConfig, GroupTimeEffect, OverlapError, aggregate_event_study, att_gt_all,
                            att_gt_dr, control_pool, dr_att_panel, enumerate_cells, estimate_event_study)
from penaltydid.inference import pointwise_se

NO_X = DidConfig(delta=0, covariates=())


def random_panel(rng, cohorts, n_per=30, n_never=0, T=40, effect=0.0):
    group = [g for g in cohorts for _ in range(n_per)] + [None] * n_never
    n = len(group)
    age = rng.normal(30, 4, size=n)
    y = rng.normal(size=(n, T)) + 0.05 * np.arange(T) + 0.02 * age[:, None]
    for i, g in enumerate(group):
        if g is not None:
            y[i, g:] += effect
    return make_panel(y, group, age=age)


# ----------------------------------------------------------------------------- control pool

def test_control_pool_examples():
    y = np.zeros((7, 31))
    panel = make_panel(y, [10, 10, 20, 20, 20, None, None])
    np.testing.assert_array_equal(control_pool(panel, 10, 12, 0), [2, 3, 4])
    assert control_pool(panel, 10, 12, 9).size == 0  # 20 <= 12 + 9
    np.testing.assert_array_equal(control_pool(panel, 10, 12, 0, include_never_treated=True), [2, 3, 4, 5, 6])
    with pytest.raises(CellSkipped, match="empty control pool"):
        att_gt_dr(panel, 10, 12, DidConfig(delta=9, covariates=()))


def test_control_pool_requires_both_periods_observed():
    obs = np.ones((4, 20), dtype=bool)
    obs[3, 12] = False
    panel = make_panel(np.zeros((4, 20)), [5, 15, 15, 15], observed=obs)
    np.testing.assert_array_equal(control_pool(panel, 5, 12, 0), [1, 2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([4, 8, 12, 16, None]), min_size=6, max_size=20),
       st.integers(0, 5), st.integers(0, 19))
def test_control_pool_invariants(groups, delta, tau):
    panel = make_panel(np.zeros((len(groups), 20)), groups)
    for g in {x for x in groups if x is not None}:
        if g - delta - 1 < 0:
            continue
        pool = control_pool(panel, g, tau, delta)
        treated = np.flatnonzero(panel.group == g)
        assert not set(pool) & set(treated)
        assert (panel.group[pool] > max(tau, g - delta - 1) + delta).all()
        assert panel.treated_mask[pool].all()


# ----------------------------------------------------------------------------- single cell

def test_intercept_only_fixture():
    y = np.zeros((10, 4))
    y[:5, 2] = 0.5
    y[5:, 2] = 0.2
    panel = make_panel(y, [2] * 5 + [3] * 5)
    eff = att_gt_dr(panel, 2, 2, NO_X)
    assert eff.estimate == pytest.approx(0.3, abs=1e-12)
    assert (eff.n_treated, eff.n_control) == (5, 5)


@pytest.mark.parametrize("seed", range(50))
def test_dr_collapses_to_difference_in_means(seed):
    rng = np.random.default_rng(seed)
    n1, n0 = rng.integers(5, 40, size=2)
    dy = rng.normal(size=n1 + n0) * rng.uniform(0.1, 3)
    d = np.r_[np.ones(n1), np.zeros(n0)]
    X = np.ones((n1 + n0, 1))
    att, inf, _ = dr_att_panel(dy, d, X, X)
    y = np.r_[np.zeros(n1 + n0), dy]
    assert att == pytest.approx(cell_mean_did(y, np.r_[d, d], np.r_[np.zeros(n1 + n0), np.ones(n1 + n0)]),
                                abs=1e-10)
    assert abs(inf.mean()) < 1e-10


def test_six_unit_textbook_oracle():
    dy = np.array([1.3, 0.4, 2.2, 0.1, -0.5, 0.9])
    d = np.array([1, 1, 1, 0, 0, 0], dtype=float)
    x = np.array([0.2, -1.1, 0.7, 0.5, -0.3, 1.4])
    X = np.column_stack([np.ones(6), x])
    att, inf, n_trim = dr_att_panel(dy, d, X, X, eps_trim=0.0)
    ref_att, ref_inf = textbook_dr_did(dy, d, x)
    assert n_trim == 0
    assert att == pytest.approx(ref_att, abs=1e-10)
    np.testing.assert_allclose(inf, ref_inf, atol=1e-10)


def test_cell_influence_spans_panel_and_matches_se(rng):
    panel = random_panel(rng, [12, 20], n_per=40, n_never=10)
    cfg = DidConfig(delta=0)
    eff = att_gt_dr(panel, 12, 14, cfg)
    assert eff.influence.shape == (panel.n_units,)
    assert abs(eff.influence.mean()) < 1e-10
    assert eff.se == pytest.approx(pointwise_se(eff.influence)[0], abs=1e-8)
    # never-treated units sit outside the default cell and carry zero influence
    assert (eff.influence[~panel.treated_mask] == 0).all()


def test_overlap_failure_and_min_size(rng):
    dy = rng.normal(size=20)
    d = np.r_[np.ones(18), np.zeros(2)]
    X = np.ones((20, 1))
    with pytest.raises(OverlapError, match="overlap failure"):
        dr_att_panel(dy, d, X, X, eps_trim=0.5)

    panel = random_panel(rng, [10], n_per=4)
    panel2 = make_panel(np.vstack([panel.outcomes["rx"], rng.normal(size=(10, 40))]),
                        [10] * 4 + [30] * 10)
    res = att_gt_all(panel2, NO_X, (0, 2))
    assert not res.effects
    mine = [s for s in res.skipped if s["g"] == 10]
    assert len(mine) == 3 and all("min size" in s["reason"] for s in mine)


def test_non_finite_covariates_skip(rng):
    base = random_panel(rng, [10, 25], n_per=10)
    age = base.age.copy()
    age[0] = np.nan
    panel = make_panel(base.outcomes["rx"], base.group, age=age)
    with pytest.raises(CellSkipped, match="non-finite"):
        att_gt_dr(panel, 10, 12, DidConfig(delta=0))


# ----------------------------------------------------------------------------- enumeration

def test_cell_enumeration_hand_counts():
    panel = make_panel(np.zeros((6, 18)), [10, 10, 15, 15, 20, 20])
    cells = enumerate_cells(panel, NO_X, (-5, 5))
    # g=10: 5..15 (11), g=15: 10..17 (8), g=20: 15..17 (3)
    assert len(cells) == 22
    assert cells == sorted(cells)
    assert enumerate_cells(panel, NO_X, (5, 2)) == []
    res = att_gt_all(panel, NO_X, (5, 2))
    assert res.effects == () and res.skipped == ()

    single = make_panel(np.zeros((2, 12)), [6, 6])
    assert [tau for _, tau in enumerate_cells(single, NO_X, (-24, 72))] == list(range(12))


def test_negative_delta_rejected():
    with pytest.raises(ValueError):
        att_gt_all(make_panel(np.zeros((2, 5)), [2, 3]), DidConfig(delta=-1))


def test_anticipation_base_period_equivalence(rng):
    panel = random_panel(rng, [20, 28, 36], n_per=15, T=48)
    shifted = make_panel(panel.outcomes["rx"], [int(g) - 9 for g in panel.group], age=panel.age)
    a = att_gt_all(panel, DidConfig(delta=9), (-3, 6))
    b = att_gt_all(shifted, DidConfig(delta=0), (6, 15))
    assert len(a.effects) == len(b.effects) > 0
    for ea, eb in zip(a.effects, b.effects):
        assert (ea.g - 9, ea.tau) == (eb.g, eb.tau)
        assert ea.estimate == pytest.approx(eb.estimate, abs=1e-12)


# ----------------------------------------------------------------------------- aggregation

def _effect(g, tau, est, n):
    return GroupTimeEffect(g, tau, est, np.zeros(n), 1, 1)


def test_aggregation_hand_examples():
    panel = make_panel(np.zeros((10, 30)), [10] * 6 + [20] * 4)
    curve = aggregate_event_study([_effect(10, 12, 1.0, 10), _effect(20, 22, 2.0, 10)], panel)
    assert curve.event_times.tolist() == [2]
    assert curve.estimates[0] == pytest.approx(1.4)
    assert curve.group_weights[0] == pytest.approx({10: 0.6, 20: 0.4})
    with pytest.raises(ValueError):
        aggregate_event_study([], panel)


def test_single_cohort_curve_is_cell_path(rng):
    y = rng.normal(size=(40, 20))
    panel = make_panel(y, [8] * 20 + [None] * 20, age=rng.normal(30, 4, 40))
    cfg = DidConfig(delta=0, include_never_treated=True)
    res = att_gt_all(panel, cfg, (-3, 3))
    curve = aggregate_event_study(res, panel)
    assert curve.event_times.tolist() == list(range(-3, 4))
    np.testing.assert_array_equal(curve.estimates, [e.estimate for e in res.effects])
    np.testing.assert_allclose(curve.influence, np.column_stack([e.influence for e in res.effects]), atol=1e-14)


def test_five_cohort_weights_recomputed(rng):
    sizes = {10: 7, 14: 3, 18: 11, 22: 5, 26: 9}
    group = [g for g, k in sizes.items() for _ in range(k)] + [None] * 4
    panel = make_panel(np.zeros((len(group), 40)), group)
    effects = [_effect(g, tau, float(rng.normal()), len(group)) for g in sizes for tau in range(g - 2, min(g + 16, 40))]
    curve = aggregate_event_study(effects, panel)
    for k, t in enumerate(curve.event_times):
        w = curve.group_weights[k]
        assert sum(w.values()) == pytest.approx(1.0, abs=1e-12)
        total = sum(sizes[g] for g in w)
        for g, v in w.items():
            assert v == pytest.approx(sizes[g] / total)


def test_curve_influence_mean_zero_and_bands_contain_pointwise(rng):
    panel = random_panel(rng, [12, 18, 24], n_per=40, T=36, effect=0.5)
    curve, cells = estimate_event_study(panel, DidConfig(delta=0), (-6, 6), n_draws=499, seed=1)
    assert np.abs(curve.influence.mean(axis=0)).max() < 1e-10
    assert (curve.uniform_lo <= curve.pointwise_lo + 1e-15).all()
    assert (curve.uniform_hi >= curve.pointwise_hi - 1e-15).all()
    assert curve.critical_value >= 1.959963984540054
    post = curve.event_times >= 0
    assert abs(curve.estimates[post].mean() - 0.5) < 0.3
    again, _ = estimate_event_study(panel, DidConfig(delta=0), (-6, 6), n_draws=499, seed=1)
    np.testing.assert_array_equal(curve.uniform_lo, again.uniform_lo)


def test_no_estimable_cells_raises():
    panel = make_panel(np.zeros((4, 10)), [5, 5, 5, 5])
    with pytest.raises(CellSkipped):
        estimate_event_study(panel, NO_X, (-2, 2), n_draws=199)
