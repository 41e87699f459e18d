"""Staggered doubly-robust DiD with anticipation and not-yet-treated controls.

Cells ATT(g, tau) compare cohort ``g`` against units not yet treated (nor
anticipating) by ``max(tau, g - delta - 1) + delta``; every cell uses the
fixed base period ``g - delta - 1``. Propensity scores are logits and the
outcome regression is OLS of the control outcome change, both refit per cell.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .learners import expand_features, fit_logit, fit_ols, make_design, predict_proba
from .panel import NEVER, Panel

log = logging.getLogger(__name__)


class CellSkipped(Exception):
    """A group-time cell could not be estimated; recorded, not fatal."""


class OverlapError(CellSkipped):
    pass


@dataclass(frozen=True)
class DidConfig:
    delta: int = 9
    outcome: str = "rx"
    covariates: tuple[str, ...] = ("age",)
    ps_features: str = "linear"
    or_features: str = "linear"
    include_never_treated: bool = False
    min_cell_size: int = 5
    eps_trim: float = 0.01
    eps_clip: float = 1e-6
    logit_tol: float = 1e-10


@dataclass(frozen=True)
class GroupTimeCell:
    g: int
    tau: int
    delta: int
    treated_ids: np.ndarray
    control_ids: np.ndarray

    @property
    def base_period(self) -> int:
        return self.g - self.delta - 1


@dataclass(frozen=True, eq=False)
class GroupTimeEffect:
    g: int
    tau: int
    estimate: float
    influence: np.ndarray
    n_treated: int
    n_control: int
    n_trimmed: int = 0

    @property
    def event_time(self) -> int:
        return self.tau - self.g

    @property
    def se(self) -> float:
        n = len(self.influence)
        return float(np.sqrt(np.mean(self.influence ** 2) / n))


@dataclass(frozen=True, eq=False)
class AttGtResult:
    effects: tuple[GroupTimeEffect, ...]
    skipped: tuple[dict, ...]
    n_units: int

    def cell(self, g: int, tau: int) -> GroupTimeEffect:
        for e in self.effects:
            if e.g == g and e.tau == tau:
                return e
        raise KeyError((g, tau))


@dataclass(frozen=True, eq=False)
class EventStudyCurve:
    event_times: np.ndarray
    estimates: np.ndarray
    influence: np.ndarray
    pointwise_se: np.ndarray
    group_weights: tuple[dict, ...]
    n_cells: np.ndarray
    critical_value: float | None = None
    band_se: np.ndarray | None = None
    diagnostics: tuple[str, ...] = ()

    @property
    def uniform_lo(self) -> np.ndarray:
        return self.estimates - self.critical_value * self.band_se

    @property
    def uniform_hi(self) -> np.ndarray:
        return self.estimates + self.critical_value * self.band_se

    @property
    def pointwise_lo(self) -> np.ndarray:
        return self.estimates - 1.959963984540054 * self.band_se

    @property
    def pointwise_hi(self) -> np.ndarray:
        return self.estimates + 1.959963984540054 * self.band_se

    def at(self, t: int) -> int:
        hits = np.flatnonzero(self.event_times == t)
        if not hits.size:
            raise KeyError(t)
        return int(hits[0])


def unit_covariates(panel: Panel, names: Sequence[str]) -> np.ndarray:
    cols = []
    for name in names:
        cols.append(panel.age if name == "age" else panel.covariates[name])
    return np.column_stack(cols) if cols else np.empty((panel.n_units, 0))


def control_pool(panel: Panel, g: int, tau: int, delta: int,
                 include_never_treated: bool = False) -> np.ndarray:
    """Indices of units untreated and not anticipating through ``max(tau, base) + delta``."""
    base = g - delta - 1
    cutoff = max(tau, base) + delta
    grp = panel.group
    pool = (grp > cutoff) & (grp != g) & (grp != NEVER)
    if include_never_treated:
        pool |= grp == NEVER
    jt, jb = panel.column(tau), panel.column(base)
    pool &= panel.observed[:, jt] & panel.observed[:, jb]
    return np.flatnonzero(pool)


def treated_units(panel: Panel, g: int, tau: int, delta: int) -> np.ndarray:
    jt, jb = panel.column(tau), panel.column(g - delta - 1)
    return np.flatnonzero((panel.group == g) & panel.observed[:, jt] & panel.observed[:, jb])


def make_cell(panel: Panel, g: int, tau: int, config: DidConfig = DidConfig()) -> GroupTimeCell:
    base = g - config.delta - 1
    for m, what in ((base, "base period"), (tau, "period")):
        if not panel.window[0] <= m <= panel.window[1]:
            raise CellSkipped(f"{what} {m} outside window {panel.window}")
    return GroupTimeCell(g, tau, config.delta, treated_units(panel, g, tau, config.delta),
                         control_pool(panel, g, tau, config.delta, config.include_never_treated))


def dr_att_panel(dy: np.ndarray, d: np.ndarray, x_ps: np.ndarray, x_or: np.ndarray,
                 eps_trim: float = 0.01, eps_clip: float = 1e-6, logit_tol: float = 1e-10):
    """Doubly-robust ATT for a two-period panel and its influence function.

    Returns ``(att, influence, n_trimmed)``; ``influence`` is per row of the
    cell sample and already includes the estimation effect of the logit
    propensity score and the OLS outcome regression.
    """
    n = len(dy)
    d = d.astype(np.float64)
    ps_fit = fit_logit(x_ps, d, tol=logit_tol)
    if not ps_fit.converged:
        raise CellSkipped("propensity logit did not converge: " + "; ".join(ps_fit.diagnostics))
    ps = predict_proba(ps_fit, x_ps, eps_clip)
    keep = (d == 1) | (ps <= 1 - eps_trim)
    n_trimmed = int((~keep).sum())
    if not np.any(keep & (d == 0)):
        raise OverlapError("overlap failure: every control trimmed")

    ctrl = d == 0
    or_fit = fit_ols(x_or[ctrl], dy[ctrl])
    m = x_or @ or_fit.coefficients
    resid = dy - m

    w_treat = keep * d
    w_cont = keep * ps * (1 - d) / (1 - ps)
    att_treat = w_treat * resid
    att_cont = w_cont * resid
    eta_treat = att_treat.mean() / w_treat.mean()
    eta_cont = att_cont.mean() / w_cont.mean()
    att = eta_treat - eta_cont

    # OLS linearisation, controls only
    wols_x = (1 - d)[:, None] * x_or
    xpx_inv = np.linalg.pinv(wols_x.T @ x_or / n)
    lin_ols = (wols_x * resid[:, None]) @ xpx_inv
    # logit linearisation
    wps = ps * (1 - ps)
    hess_inv = np.linalg.pinv((x_ps * wps[:, None]).T @ x_ps / n)
    lin_ps = ((d - ps)[:, None] * x_ps) @ hess_inv

    inf_treat = (att_treat - w_treat * eta_treat - lin_ols @ (w_treat @ x_or / n)) / w_treat.mean()
    m2 = (w_cont * (resid - eta_cont)) @ x_ps / n
    m3 = w_cont @ x_or / n
    inf_cont = (att_cont - w_cont * eta_cont + lin_ps @ m2 - lin_ols @ m3) / w_cont.mean()
    return float(att), inf_treat - inf_cont, n_trimmed


def att_gt_dr(panel: Panel, g: int, tau: int, config: DidConfig = DidConfig(),
              cell: GroupTimeCell | None = None) -> GroupTimeEffect:
    """ATT(g, tau) with anticipation ``config.delta``; influence spans all panel units."""
    cell = cell or make_cell(panel, g, tau, config)
    nt, nc = len(cell.treated_ids), len(cell.control_ids)
    if nc == 0:
        raise CellSkipped("empty control pool")
    if nt < config.min_cell_size or nc < config.min_cell_size:
        raise CellSkipped(f"cell below min size ({nt} treated, {nc} control)")
    rows = np.concatenate([cell.treated_ids, cell.control_ids])
    d = np.concatenate([np.ones(nt), np.zeros(nc)])
    y = panel.outcomes[config.outcome]
    dy = (y[rows, panel.column(tau)].astype(np.float64)
          - y[rows, panel.column(cell.base_period)].astype(np.float64))
    x = unit_covariates(panel, config.covariates)[rows]
    if not np.isfinite(x).all():
        raise CellSkipped("non-finite covariates in cell (never-treated without placebo ages?)")
    x_ps = make_design({f"ps{j}": c for j, c in enumerate(expand_features(x, config.ps_features).T)},
                       n=len(rows)).values
    x_or = make_design({f"or{j}": c for j, c in enumerate(expand_features(x, config.or_features).T)},
                       n=len(rows)).values
    att, inf, n_trim = dr_att_panel(dy, d, x_ps, x_or, config.eps_trim, config.eps_clip, config.logit_tol)
    N = panel.n_units
    full = np.zeros(N)
    full[rows] = inf * (N / len(rows))
    return GroupTimeEffect(g, tau, att, full, nt, nc, n_trim)


def enumerate_cells(panel: Panel, config: DidConfig, event_window: tuple[int, int]) -> list[tuple[int, int]]:
    lo, hi = panel.window
    t_min, t_max = event_window
    cells = []
    for g in np.unique(panel.group[panel.treated_mask]):
        g = int(g)
        for tau in range(max(lo, g + t_min), min(hi, g + t_max) + 1):
            cells.append((g, tau))
    return cells


def att_gt_all(panel: Panel, config: DidConfig = DidConfig(),
               event_window: tuple[int, int] = (-24, 72)) -> AttGtResult:
    """Every estimable cell with ``tau - g`` inside ``event_window``, ordered by (g, tau)."""
    if config.delta < 0:
        raise ValueError("delta must be >= 0")
    effects, skipped = [], []
    for g, tau in enumerate_cells(panel, config, event_window):
        try:
            effects.append(att_gt_dr(panel, g, tau, config))
        except CellSkipped as exc:
            skipped.append({"g": g, "tau": tau, "event_time": tau - g, "reason": str(exc)})
    if skipped:
        log.info("%d of %d cells skipped", len(skipped), len(skipped) + len(effects))
    return AttGtResult(tuple(effects), tuple(skipped), panel.n_units)


def aggregate_event_study(effects: Sequence[GroupTimeEffect] | AttGtResult, panel: Panel) -> EventStudyCurve:
    """Cohort-share weighted event-study curve with propagated influence functions.

    The influence of the estimated cohort shares is included.
    """
    if isinstance(effects, AttGtResult):
        effects = effects.effects
    effects = list(effects)
    if not effects:
        raise ValueError("no group-time effects to aggregate")
    N = panel.n_units
    groups = panel.group
    by_t: dict[int, list[GroupTimeEffect]] = {}
    for e in effects:
        by_t.setdefault(e.event_time, []).append(e)
    ts = np.array(sorted(by_t), dtype=np.int64)
    est = np.empty(len(ts))
    inf = np.empty((N, len(ts)))
    weights, n_cells = [], np.empty(len(ts), dtype=np.int64)
    for k, t in enumerate(ts):
        cells = sorted(by_t[int(t)], key=lambda e: e.g)
        gs = np.array([e.g for e in cells])
        ind = (groups[:, None] == gs[None, :]).astype(np.float64)
        pg = ind.mean(axis=0)
        s = pg.sum()
        w = pg / s
        att = np.array([e.estimate for e in cells])
        est[k] = float(w @ att)
        cell_inf = np.column_stack([e.influence for e in cells])
        dev = ind - pg
        wif = dev / s - np.outer(dev.sum(axis=1), pg / s ** 2)
        inf[:, k] = cell_inf @ w + wif @ att
        weights.append({int(g): float(v) for g, v in zip(gs, w)})
        n_cells[k] = len(cells)
    se = np.sqrt(np.mean(inf ** 2, axis=0) / N)
    return EventStudyCurve(ts, est, inf, se, tuple(weights), n_cells)


def estimate_event_study(panel: Panel, config: DidConfig = DidConfig(),
                         event_window: tuple[int, int] = (-24, 72), n_draws: int = 999,
                         seed: int = 0, level: float = 0.95,
                         multiplier: str = "rademacher") -> tuple[EventStudyCurve, AttGtResult]:
    """Cells, aggregation and uniform bands in one call."""
    from .inference import multiplier_bootstrap

    cells = att_gt_all(panel, config, event_window)
    if not cells.effects:
        raise CellSkipped("no estimable group-time cells")
    curve = aggregate_event_study(cells, panel)
    band = multiplier_bootstrap(curve.influence, n_draws=n_draws, seed=seed,
                                multiplier=multiplier, level=level)
    return attach_band(curve, band), cells


def attach_band(curve: EventStudyCurve, band) -> EventStudyCurve:
    """Use the bootstrap critical value, floored at the pointwise normal quantile
    so the uniform band always contains the pointwise interval."""
    z = 1.959963984540054
    crit = band.critical_value
    diagnostics = curve.diagnostics + band.diagnostics
    if crit < z:
        diagnostics += (f"bootstrap critical value {crit:.4f} raised to {z:.4f}",)
        crit = z
    return replace(curve, critical_value=crit, band_se=band.pointwise_se, diagnostics=diagnostics)


EVENT_STUDY_HEADER = ("event_time", "estimate", "se", "uniform_lo", "uniform_hi", "n_cells")


def event_study_rows(curve: EventStudyCurve):
    from ._io import fmt

    for k, t in enumerate(curve.event_times):
        yield (int(t), fmt(curve.estimates[k]), fmt(curve.band_se[k]),
               fmt(curve.uniform_lo[k]), fmt(curve.uniform_hi[k]), int(curve.n_cells[k]))
