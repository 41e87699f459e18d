"""Synthetic claims panels with known ground truth.

Monthly antidepressant consumption follows a two-state (on/off) Markov chain
whose marginal probability each month is exactly

    baseline * dip(t) + effect(t) + age_level * (x - 29) + age_trend * (x - 29) * tau / 12

with ``t`` the event time. Treated units get the dip and the effect from
``t = -9`` on; untreated potential outcomes depend on the covariate only, so
conditional parallel trends hold by construction. The chain persists with
``P(on | on) - P(on | off) = persistence``.

Every shape here (dip, effect knots, cohort law) is a project choice; only
the 2% baseline and the roughly +1 p.p. effect four years after birth are
calibration targets.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import partial
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .panel import (BASE_YEAR, NEVER, ClaimTable, Panel, UnitMeta, age_from_months, build_panel)


class ConfigError(ValueError):
    pass


def _knot_eval(knots: Sequence[tuple[float, float]], t, before: float, after: float | None = None):
    """Piecewise-linear through ``knots``; ``before`` left of the first knot,
    ``after`` (default: last value) right of the last."""
    t = np.asarray(t, dtype=np.float64)
    if not knots:
        return np.full(t.shape, before)
    ts = np.array([k[0] for k in knots], dtype=np.float64)
    vs = np.array([k[1] for k in knots], dtype=np.float64)
    out = np.interp(t, ts, vs)
    out = np.where(t < ts[0], before, out)
    if after is not None:
        out = np.where(t > ts[-1], after, out)
    return out


@dataclass(frozen=True)
class TrueEffectProfile:
    """Additive effect on the monthly prescription probability by event time.

    Linear between knots, zero before the first knot, flat after the last.
    """

    knots: tuple[tuple[int, float], ...] = ((12, 0.0), (48, 0.010), (72, 0.013))

    def __call__(self, t):
        return _knot_eval(self.knots, t, before=0.0)

    @classmethod
    def zero(cls) -> "TrueEffectProfile":
        return cls(knots=())

    @classmethod
    def step(cls, size: float, start: int = 0) -> "TrueEffectProfile":
        return cls(knots=((start, size),))

    @classmethod
    def calibrated(cls) -> "TrueEffectProfile":
        return cls()


DEFAULT_DIP = ((-9, 1.0), (0, 0.4), (12, 1.0))
NO_DIP: tuple = ()


@dataclass(frozen=True)
class DgpConfig:
    n_units: int = 5000
    n_months: int = 132
    cohort_band: tuple[int, int] = (24, 84)
    never_treated_share: float = 0.35
    baseline: float = 0.02
    dip: tuple[tuple[int, float], ...] = DEFAULT_DIP
    effect: TrueEffectProfile = field(default_factory=TrueEffectProfile)
    persistence: float = 0.8
    age_mean: float = 29.0
    age_sd: float = 4.5
    age_bounds: tuple[float, float] = (20.0, 40.0)
    age_level: float = 0.0
    age_trend: float = 0.0
    cohort_age_slope: float = 0.0
    violated_trends: float = 0.0
    psy_rate: float = 0.03
    gp_rate: float = 0.25
    unbalanced_share: float = 0.0
    reform_month: int | None = None
    reform_effect: float = 0.0
    anticipation: int = 9
    seed: int = 0

    def dip_at(self, t):
        return _knot_eval(self.dip, t, before=1.0, after=1.0)

    def validate(self) -> "DgpConfig":
        if self.n_units < 1 or self.n_months < 2:
            raise ConfigError("need at least one unit and two months")
        lo, hi = self.cohort_band
        if not 0 <= lo < hi <= self.n_months:
            raise ConfigError(f"cohort band {self.cohort_band} must lie in [0, {self.n_months}]")
        if not 0.0 <= self.never_treated_share <= 1.0:
            raise ConfigError("never_treated_share must be in [0, 1]")
        if not 0.0 <= self.persistence < 1.0:
            raise ConfigError("persistence must be in [0, 1)")
        dips = np.array([v for _, v in self.dip]) if self.dip else np.ones(1)
        if (dips < 0).any() or (dips > 1).any():
            raise ConfigError("dip multipliers must lie in [0, 1]")
        pre = [t for t, v in self.effect.knots if v != 0.0 and t < -self.anticipation]
        if pre:
            raise ConfigError("effect profile must be zero before -anticipation")
        a_lo, a_hi = self.age_bounds
        span = max(abs(a_lo - self.age_mean), abs(a_hi - self.age_mean))
        years = self.n_months / 12
        slack = abs(self.age_level) * span + abs(self.age_trend) * span * years + abs(self.violated_trends) * years
        t_grid = np.arange(-self.n_months, self.n_months)
        eff = self.baseline * self.dip_at(t_grid) + self.effect(t_grid)
        if eff.min() - slack < 0 or eff.max() + slack + abs(self.reform_effect) > 1:
            raise ConfigError("monthly probability leaves [0, 1] for some unit-month")
        if not 0.0 <= self.unbalanced_share <= 1.0:
            raise ConfigError("unbalanced_share must be in [0, 1]")
        return self

    @property
    def window(self) -> tuple[int, int]:
        return 0, self.n_months - 1

    def to_json(self) -> dict:
        d = asdict(self)
        d["effect"] = [list(k) for k in self.effect.knots]
        d["dip"] = [list(k) for k in self.dip]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DgpConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown DGP keys {sorted(unknown)}")
        if "effect" in d:
            e = d["effect"]
            if isinstance(e, str):
                e = {"zero": TrueEffectProfile.zero(), "calibrated": TrueEffectProfile()}[e]
            else:
                e = TrueEffectProfile(tuple((int(a), float(b)) for a, b in e))
            d["effect"] = e
        if "dip" in d:
            d["dip"] = tuple((int(a), float(b)) for a, b in (d["dip"] or ()))
        for key in ("cohort_band", "age_bounds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "DgpConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def null_config(**kw) -> DgpConfig:
    """No dip and no effect: treated and untreated are exchangeable."""
    return replace(DgpConfig(dip=NO_DIP, effect=TrueEffectProfile.zero()), **kw)


def calibrated_config(**kw) -> DgpConfig:
    """Baseline 2%, calibrated +1 p.p. effect at four years, a cohort band wide
    enough that long horizons have not-yet-treated comparisons."""
    return replace(DgpConfig(cohort_band=(12, 120)), **kw)


def true_event_effects(config: DgpConfig, event_times=None) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form event-study path ``baseline * (dip(t) - 1) + effect(t)``.

    The reform effect (used only by the DML design) is not part of the path.
    """
    if event_times is None:
        event_times = np.arange(-(config.n_months - 1), config.n_months)
    t = np.asarray(event_times)
    return t, config.baseline * (config.dip_at(t) - 1.0) + config.effect(t)


@dataclass(frozen=True, eq=False)
class SimResult:
    panel: Panel
    claims: ClaimTable
    units: tuple[UnitMeta, ...]
    latent_rx: np.ndarray
    covariate: np.ndarray
    config: DgpConfig

    def truth(self, event_times=None):
        return true_event_effects(self.config, event_times)


def _draw_units(config: DgpConfig, rng: np.random.Generator):
    n = config.n_units
    a_lo, a_hi = config.age_bounds
    x = np.clip(rng.normal(config.age_mean, config.age_sd, n), a_lo, a_hi)
    never = rng.random(n) < config.never_treated_share
    lo, hi = config.cohort_band
    cohorts = np.arange(lo, hi)
    u = rng.random(n)
    if config.cohort_age_slope:
        mid = (lo + hi - 1) / 2
        util = config.cohort_age_slope * np.outer(x - config.age_mean, (cohorts - mid) / 12)
        prob = np.exp(util - util.max(axis=1, keepdims=True))
        cdf = np.cumsum(prob, axis=1)
        cdf /= cdf[:, -1:]
        g = cohorts[np.minimum((cdf < u[:, None]).sum(axis=1), len(cohorts) - 1)]
    else:
        g = cohorts[np.minimum((u * len(cohorts)).astype(np.int64), len(cohorts) - 1)]
    # birth year so that the mid-year age convention reproduces x within half a year
    ref = np.where(never, (lo + hi) // 2, g)
    birth_year = np.rint(BASE_YEAR + (ref - 6 - 12 * x) / 12).astype(np.int64)
    x_obs = np.where(never, x, age_from_months(birth_year, ref))
    group = np.where(never, NEVER, g)
    return x_obs, group, birth_year


def _rates(config: DgpConfig, x: np.ndarray, group: np.ndarray) -> np.ndarray:
    T = config.n_months
    tau = np.arange(T)[None, :]
    treated = group != NEVER
    g = np.where(treated, group, 0)[:, None]
    et = tau - g
    exposed = treated[:, None] & (et >= -config.anticipation)
    dip = np.where(exposed, config.dip_at(et), 1.0)
    eff = np.where(exposed, config.effect(et), 0.0)
    dev = (x - config.age_mean)[:, None]
    p = config.baseline * dip + eff + config.age_level * dev + config.age_trend * dev * tau / 12
    if config.violated_trends:
        lo, hi = config.cohort_band
        rel = np.where(treated, (group - (lo + hi) / 2) / (hi - lo), 0.0)[:, None]
        p = p + config.violated_trends * rel * tau / 12
    if config.reform_month is not None and config.reform_effect:
        hit = treated[:, None] & (g >= config.reform_month) & (et >= 1)
        p = p + np.where(hit, config.reform_effect, 0.0)
    return p


def markov_consumption(p: np.ndarray, persistence: float, rng: np.random.Generator) -> np.ndarray:
    """On/off chain with month-by-month marginal ``p`` and lag-one persistence.

    ``P(on_tau | s) = p_tau - rho * p_{tau-1} + rho * s`` keeps every marginal
    exact; infeasible paths raise :class:`ConfigError`.
    """
    rho = persistence
    n, T = p.shape
    if (p < 0).any() or (p > 1).any():
        raise ConfigError("monthly probability outside [0, 1]")
    q = p[:, 1:] - rho * p[:, :-1]
    if (q < -1e-12).any() or (q + rho > 1 + 1e-12).any():
        raise ConfigError("persistence too high for the month-to-month change in probability")
    u = rng.random((n, T))
    s = np.empty((n, T), dtype=np.uint8)
    s[:, 0] = u[:, 0] < p[:, 0]
    for t in range(1, T):
        s[:, t] = u[:, t] < q[:, t - 1] + rho * s[:, t - 1]
    return s


def spells_to_claims(unit_ids: np.ndarray, s: np.ndarray, visits: dict[str, np.ndarray]) -> ClaimTable:
    """One purchase of ``L`` 30-pill packages at the start of each run of ``L`` on-months."""
    n, T = s.shape
    padded = np.zeros((n, T + 2), dtype=np.int8)
    padded[:, 1:-1] = s
    d = np.diff(padded, axis=1)
    su, sm = np.nonzero(d == 1)
    _, em = np.nonzero(d == -1)
    length = em - sm
    parts_u = [unit_ids[su]]
    parts_m = [sm.astype(np.int64)]
    parts_k = [np.full(len(su), "rx", dtype=object)]
    parts_p = [length.astype(np.int64)]
    parts_q = [np.full(len(su), 30, dtype=np.int64)]
    for kind, counts in visits.items():
        vu, vm = np.nonzero(counts)
        reps = counts[vu, vm]
        parts_u.append(np.repeat(unit_ids[vu], reps))
        parts_m.append(np.repeat(vm, reps).astype(np.int64))
        parts_k.append(np.full(int(reps.sum()), kind, dtype=object))
        parts_p.append(np.zeros(int(reps.sum()), dtype=np.int64))
        parts_q.append(np.zeros(int(reps.sum()), dtype=np.int64))
    uid = np.concatenate(parts_u)
    month = np.concatenate(parts_m)
    order = np.lexsort((month, uid.astype(str)))
    return ClaimTable(uid[order], month[order], np.concatenate(parts_k)[order],
                      np.concatenate(parts_p)[order], np.concatenate(parts_q)[order])


def simulate_panel(config: DgpConfig) -> SimResult:
    """Draw units, consumption paths and visits; emit claims and the built panel."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    x, group, birth_year = _draw_units(config, rng)
    n, T = config.n_units, config.n_months
    p = _rates(config, x, group)
    s = markov_consumption(p, config.persistence, rng)
    visits = {"psy": rng.poisson(config.psy_rate, (n, T)), "gp": rng.poisson(config.gp_rate, (n, T))}
    employed = rng.random(n) < 0.7
    subsidy = rng.random(n) < 0.25
    cesarean = (rng.random(n) < 0.33) & (group != NEVER)

    enrolled_from = np.full(n, -1)
    enrolled_to = np.full(n, -1)
    partial = rng.random(n) < config.unbalanced_share
    cut = rng.integers(1, T, n)
    late = rng.random(n) < 0.5
    enrolled_from[partial & late] = cut[partial & late]
    enrolled_to[partial & ~late] = cut[partial & ~late] - 1
    # insured months only generate claims
    months = np.arange(T)[None, :]
    insured = np.ones((n, T), dtype=bool)
    insured &= np.where(enrolled_from[:, None] >= 0, months >= enrolled_from[:, None], True)
    insured &= np.where(enrolled_to[:, None] >= 0, months <= enrolled_to[:, None], True)
    s = s * insured
    visits = {k: v * insured for k, v in visits.items()}

    width = len(str(n))
    unit_ids = np.array([f"u{i:0{width}d}" for i in range(n)], dtype=object)
    units = tuple(
        UnitMeta(
            unit_id=unit_ids[i], birth_year=int(birth_year[i]),
            first_child_month=None if group[i] == NEVER else int(group[i]),
            employed_at_birth=bool(employed[i]), subsidy=bool(subsidy[i]), cesarean=bool(cesarean[i]),
            enrolled_from=None if enrolled_from[i] < 0 else int(enrolled_from[i]),
            enrolled_to=None if enrolled_to[i] < 0 else int(enrolled_to[i]),
        )
        for i in range(n)
    )
    claims = spells_to_claims(unit_ids, s, visits)
    panel = build_panel(claims, units, config.window, balanced=config.unbalanced_share == 0.0)
    return SimResult(panel, claims, units, s, x, config)


# ----------------------------------------------------------------------------- Monte Carlo

def rep_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, rep]).generate_state(1)[0])


@dataclass(frozen=True)
class DrEventStudyEstimator:
    """Picklable ``(panel, seed) -> EventStudyCurve`` callable for :func:`monte_carlo_run`."""

    config: object = None
    event_window: tuple[int, int] = (-24, 36)
    n_draws: int = 999

    def __call__(self, panel: Panel, seed: int):
        from .did import DidConfig, estimate_event_study

        curve, _ = estimate_event_study(panel, self.config or DidConfig(), self.event_window,
                                        n_draws=self.n_draws, seed=seed)
        return curve


def dr_event_study_estimator(config=None, event_window: tuple[int, int] = (-24, 36), n_draws: int = 999):
    return DrEventStudyEstimator(config, tuple(event_window), n_draws)


def _one_rep(dgp, estimator: Callable, simulate: Callable, seed: int, r: int):
    s = rep_seed(seed, r)
    cfg = replace(dgp, seed=s)
    try:
        sim = simulate(cfg)
        panel = sim.panel if hasattr(sim, "panel") else sim
        res = estimator(panel, s)
    except Exception as exc:  # estimator failures are part of the report
        return cfg, None, f"rep {r}: {type(exc).__name__}: {exc}"
    return cfg, (np.asarray(res.event_times), np.asarray(res.estimates),
                 np.asarray(res.pointwise_lo), np.asarray(res.pointwise_hi),
                 np.asarray(res.uniform_lo), np.asarray(res.uniform_hi)), None


def monte_carlo_run(dgp, estimator: Callable, n_reps: int, seed: int,
                    simulate: Callable = simulate_panel, truth: Callable | None = None,
                    workers: int = 1) -> dict:
    """Bias, RMSE and pointwise/uniform coverage of ``estimator`` over replications.

    ``estimator(panel, seed)`` returns an object with ``event_times``,
    ``estimates``, ``pointwise_lo/hi`` and ``uniform_lo/hi``. Failures are
    counted, not raised. With ``workers > 1`` replications run in a process
    pool (estimator and simulator must pickle); results are reassembled in
    replication order, so the table does not depend on ``workers``.
    """
    if n_reps < 2:
        raise ValueError("n_reps must be >= 2")
    truth = truth or (lambda cfg, ts: true_event_effects(cfg, ts)[1])
    job = partial(_one_rep, dgp, estimator, simulate, seed)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(job, range(n_reps)))
    else:
        outcomes = [job(r) for r in range(n_reps)]
    per_t: dict[int, list[tuple[float, bool]]] = {}
    uniform_hits, n_ok, failures = [], 0, []
    for cfg, res, err in outcomes:
        if res is None:
            failures.append(err)
            continue
        n_ok += 1
        ts, est, pw_lo, pw_hi, un_lo, un_hi = res
        tv = np.asarray(truth(cfg, ts), dtype=np.float64)
        cover_pw = (pw_lo <= tv) & (tv <= pw_hi)
        uniform_hits.append(bool(((un_lo <= tv) & (tv <= un_hi)).all()))
        for k, t in enumerate(ts):
            per_t.setdefault(int(t), []).append((est[k] - tv[k], bool(cover_pw[k])))
    ts = sorted(per_t)
    bias, rmse, bias_se, cov, cov_se, counts = [], [], [], [], [], []
    for t in ts:
        err = np.array([e for e, _ in per_t[t]])
        hit = np.array([c for _, c in per_t[t]], dtype=float)
        counts.append(len(err))
        bias.append(float(err.mean()))
        bias_se.append(float(err.std(ddof=1) / np.sqrt(len(err))) if len(err) > 1 else float("nan"))
        rmse.append(float(np.sqrt(np.mean(err ** 2))))
        cov.append(float(hit.mean()))
        cov_se.append(float(np.sqrt(hit.mean() * (1 - hit.mean()) / len(hit))))
    u = np.array(uniform_hits, dtype=float)
    return {
        "n_reps": n_reps,
        "n_ok": n_ok,
        "n_failed": len(failures),
        "failures": failures,
        "event_times": ts,
        "n_per_t": counts,
        "bias": bias,
        "bias_mcse": bias_se,
        "rmse": rmse,
        "pointwise_coverage": cov,
        "pointwise_coverage_mcse": cov_se,
        "uniform_coverage": float(u.mean()) if len(u) else float("nan"),
        "uniform_coverage_mcse": float(np.sqrt(u.mean() * (1 - u.mean()) / len(u))) if len(u) else float("nan"),
    }


# ----------------------------------------------------------------------------- DR stress DGP

@dataclass(frozen=True)
class DrDgpConfig:
    """Two cohorts, continuous outcome, both nuisances quadratic in the covariate.

    ``P(G = early | x) = expit(ps_coef . (1, x, x^2))`` and the untreated
    monthly drift is ``(trend_coef . (1, x, x^2)) / 12``, so a logit or OLS
    in ``(1, x)`` alone is misspecified.
    """

    n_units: int = 2000
    n_months: int = 72
    early: int = 20
    late: int = 60
    ps_coef: tuple[float, float, float] = (0.6, 0.5, -0.5)
    trend_coef: tuple[float, float, float] = (0.2, 0.3, 0.6)
    effect: tuple[tuple[int, float], ...] = ((0, 0.5), (36, 1.2))
    noise_sd: float = 1.0
    anticipation: int = 9
    seed: int = 0

    def effect_at(self, t):
        return _knot_eval(self.effect, t, before=0.0)


def simulate_dr_panel(config: DrDgpConfig) -> Panel:
    rng = np.random.default_rng(config.seed)
    n, T = config.n_units, config.n_months
    x = rng.normal(0.0, 1.0, n)
    basis = np.column_stack([np.ones(n), x, x ** 2])
    early = rng.random(n) < expit(basis @ np.asarray(config.ps_coef))
    group = np.where(early, config.early, config.late).astype(np.int64)
    drift = basis @ np.asarray(config.trend_coef)
    tau = np.arange(T)[None, :]
    et = tau - group[:, None]
    fe = 0.5 * x + rng.normal(0.0, 1.0, n)
    y = (fe[:, None] + drift[:, None] * tau / 12
         + np.where(et >= -config.anticipation, config.effect_at(et), 0.0)
         + rng.normal(0.0, config.noise_sd, (n, T)))
    units = tuple(UnitMeta(f"d{i}", 1990, int(group[i]), age_override=float(x[i])) for i in range(n))
    return Panel(
        unit_ids=np.array([u.unit_id for u in units], dtype=object),
        months=np.arange(T, dtype=np.int64),
        outcomes={"y": y},
        observed=np.ones((n, T), dtype=bool),
        group=group,
        age=x,
        units=units,
        balanced=True,
    )


# ----------------------------------------------------------------------------- DML mothers

@dataclass(frozen=True)
class MotherDgpConfig:
    """Mothers by birth month around a reform, with yearly any-prescription outcomes.

    Births on or after ``reform_month`` get ``atet`` added to the probability
    in event years >= 1. Season (birth quarter) and calendar-year effects are
    additive, so the 2x2 common-trends assumption holds.
    """

    n_per_month: int = 834
    reform_month: int = 132
    months_before: int = 24
    months_after: int = 3
    atet: float = -0.02
    event_years: tuple[int, ...] = (-2, -1, 0, 1, 2)
    base: float = 0.08
    year_trend: float = 0.004
    seed: int = 0


def simulate_mothers(config: MotherDgpConfig):
    from .dml import MotherTable

    rng = np.random.default_rng(config.seed)
    months = np.arange(config.reform_month - config.months_before, config.reform_month + config.months_after)
    birth = np.repeat(months, config.n_per_month)
    n = len(birth)
    quarter = (birth % 12) // 3
    q1 = quarter == 0
    region = rng.integers(0, 7, n)
    civil = rng.choice(3, n, p=[0.55, 0.4, 0.05])
    language = rng.choice(3, n, p=[0.65, 0.25, 0.10])
    employed = rng.random(n) < np.where(q1, 0.72, 0.64)
    subsidy = rng.random(n) < np.where(q1, 0.22, 0.28)
    age = np.clip(rng.normal(np.where(q1, 30.8, 30.3), 4.5), 20, 40)
    x = np.column_stack([region, civil, language, employed, subsidy, age]).astype(np.float64)
    names = ("region", "civil_status", "language", "employed", "subsidy", "age")
    p_x = (config.base + 0.03 * subsidy - 0.02 * employed + 0.02 * (age < 25)
           + 0.004 * (region - 3) + 0.01 * (civil == 2))
    season = 0.01 * np.cos(2 * np.pi * (birth % 12) / 12)
    year = (birth - months[0]) / 12
    y = {}
    for k in config.event_years:
        p = p_x + season + config.year_trend * (year + k)
        if k >= 1:
            p = p + np.where(birth >= config.reform_month, config.atet, 0.0)
        y[k] = (rng.random(n) < p).astype(np.float64)
    takeup = np.where(birth >= config.reform_month, rng.random(n) < 0.8, False).astype(np.float64)
    return MotherTable(birth_month=birth, x=x, x_names=names, y=y, extra={"takeup": takeup})
