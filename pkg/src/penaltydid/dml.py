"""Two-period ITT difference-in-differences with cross-fitted ML nuisances.

Rows are mothers. ``d`` marks the reform side of the birth-month cutoff and
``t`` the reform year versus the year before. The orthogonal score for the
ATET with repeated cross sections is

    psi = (t - lam) / (lam (1 - lam)) * y / p * (d - g(x)) / (1 - g(x))
          - (d - g(x)) / (lam (1 - lam) p (1 - g(x))) * l(x) - theta

with ``g(x) = P(D = 1 | x)``, ``l(x) = E[(T - lam) Y | x, D = 0]`` and the
marginal shares ``p = P(D = 1)``, ``lam = P(T = 1)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .forest import DEFAULT_GRID, ForestConfig, fit_forest, grid_tune
from .learners import LearnerSpec, expand_features, fit_logit, fit_ols, kfold_split, make_design, predict_proba
from .panel import Panel

log = logging.getLogger(__name__)


class DmlError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MotherTable:
    """One row per mother: birth month, covariates and yearly outcomes by event year."""

    birth_month: np.ndarray
    x: np.ndarray
    x_names: tuple[str, ...]
    y: Mapping[int, np.ndarray]
    extra: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.birth_month)


@dataclass(frozen=True, eq=False)
class DidSample:
    y: np.ndarray
    d: np.ndarray
    t: np.ndarray
    x: np.ndarray
    x_names: tuple[str, ...] = ()
    extra: Mapping[str, np.ndarray] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        for name in ("d", "t"):
            v = getattr(self, name)
            if not np.isin(v, (0, 1)).all():
                raise DmlError(f"{name} must be binary")
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise DmlError("x must be an (n, p) matrix aligned with y")

    def __len__(self):
        return len(self.y)

    def cell_counts(self) -> dict[str, int]:
        return {f"d{a}t{b}": int(((self.d == a) & (self.t == b)).sum()) for a in (0, 1) for b in (0, 1)}

    def check_cells(self):
        counts = self.cell_counts()
        empty = [k for k, v in counts.items() if v == 0]
        if empty:
            raise DmlError(f"empty DiD cell(s) {empty}; counts {counts}")


@dataclass(frozen=True)
class DmlConfig:
    k_folds: int = 5
    g_learner: LearnerSpec = LearnerSpec(kind="forest", grid=DEFAULT_GRID)
    l_learner: LearnerSpec = LearnerSpec(kind="forest", grid=DEFAULT_GRID)
    trim: float = 0.02
    eps_clip: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.k_folds < 2:
            raise DmlError("k_folds must be >= 2")


@dataclass(frozen=True, eq=False)
class AtetResult:
    theta: float
    se: float
    ci95: tuple[float, float]
    n: int
    n_trimmed: int
    score_mean: float
    fold_diagnostics: tuple[dict, ...]
    scores: np.ndarray
    label: str = ""

    def to_json(self) -> dict:
        return {"theta": self.theta, "se": self.se, "ci95": list(self.ci95), "n": self.n,
                "n_trimmed": self.n_trimmed, "score_mean": self.score_mean,
                "fold_diagnostics": list(self.fold_diagnostics)}


# ----------------------------------------------------------------------------- samples

def event_year_window(g, k: int) -> tuple:
    """Calendar months of event year ``k`` for a birth in month ``g`` (inclusive)."""
    return g + 12 * k - 11, g + 12 * k


def mother_table_from_panel(panel: Panel, event_years: Sequence[int] = (-2, -1, 0, 1, 2),
                            outcome: str = "rx") -> MotherTable:
    """Any-prescription-in-year outcomes for treated units; NaN where the year is not fully observed."""
    idx = np.flatnonzero(panel.treated_mask)
    g = panel.group[idx]
    lo = panel.window[0]
    yv = np.asarray(panel.outcomes[outcome]).astype(bool)
    y = {}
    for k in event_years:
        out = np.full(len(idx), np.nan)
        a, b = event_year_window(g, k)
        for r, (i, s, e) in enumerate(zip(idx, a, b)):
            js, je = s - lo, e - lo
            if js >= 0 and je < panel.n_months and panel.observed[i, js:je + 1].all():
                out[r] = float(yv[i, js:je + 1].any())
        y[k] = out
    x = np.column_stack([panel.age[idx], panel.covariates["employed"][idx], panel.covariates["subsidy"][idx]])
    return MotherTable(birth_month=g.copy(), x=x, x_names=("age", "employed", "subsidy"), y=y)


def build_did_sample(table: MotherTable, reform_month: int, window_months: int = 3,
                     shift_months: int = 0, event_year: int = 1) -> DidSample:
    """2x2 birth-month design around the cutoff ``reform_month - shift_months``.

    D = 1 births fall in ``[cut, cut + w)`` (T = 1) or a year earlier (T = 0);
    D = 0 births in the ``w`` months just before each of those.
    """
    if window_months < 1:
        raise DmlError("window_months must be >= 1")
    cut = reform_month - shift_months
    w = window_months
    spans = {  # (d, t): [start, stop)
        (1, 1): (cut, cut + w),
        (0, 1): (cut - w, cut),
        (1, 0): (cut - 12, cut - 12 + w),
        (0, 0): (cut - 12 - w, cut - 12),
    }
    bm = table.birth_month
    if event_year not in table.y:
        raise DmlError(f"no outcome for event year {event_year}")
    yk = table.y[event_year]
    d = np.full(len(bm), -1)
    t = np.full(len(bm), -1)
    for (dv, tv), (a, b) in spans.items():
        sel = (bm >= a) & (bm < b)
        d[sel] = dv
        t[sel] = tv
    keep = (d >= 0) & np.isfinite(yk)
    sample = DidSample(
        y=yk[keep].astype(np.float64), d=d[keep].astype(np.float64), t=t[keep].astype(np.float64),
        x=table.x[keep], x_names=table.x_names,
        extra={k: v[keep] for k, v in table.extra.items()},
        label=f"window={w} shift={shift_months} year={event_year}",
    )
    sample.check_cells()
    return sample


# ----------------------------------------------------------------------------- nuisances

def _fit_predict(spec: LearnerSpec, x_train, y_train, x_test, seed: int, binary: bool, tuned=None):
    feats_tr = expand_features(x_train, spec.features)
    feats_te = expand_features(x_test, spec.features)
    if spec.kind == "forest":
        cfg = spec.forest or ForestConfig(seed=seed)
        if tuned is not None:
            cfg = replace(cfg, max_depth=tuned[0], min_leaf=tuned[1])
        cfg = replace(cfg, seed=seed)
        return fit_forest(feats_tr, y_train, cfg).predict(feats_te)
    if spec.kind == "logit":
        if not binary:
            raise DmlError("logit learner needs a binary target")
        X_tr = make_design({f"x{j}": c for j, c in enumerate(feats_tr.T)}, n=len(feats_tr)).values
        X_te = make_design({f"x{j}": c for j, c in enumerate(feats_te.T)}, n=len(feats_te)).values
        fit = fit_logit(X_tr, y_train)
        return predict_proba(fit, X_te, 0.0)
    if spec.kind == "ols":
        X_tr = make_design({f"x{j}": c for j, c in enumerate(feats_tr.T)}, n=len(feats_tr)).values
        X_te = make_design({f"x{j}": c for j, c in enumerate(feats_te.T)}, n=len(feats_te)).values
        return fit_ols(X_tr, y_train).predict(X_te)
    if spec.kind == "mean":
        return np.full(len(x_test), float(np.mean(y_train)))
    raise DmlError(f"unknown learner kind {spec.kind!r}")


def _tune(spec: LearnerSpec, x, y, seed: int):
    if spec.kind != "forest" or not spec.grid:
        return None
    grid = list(spec.grid)
    if len(grid) == 1:
        return grid[0]
    n_trees = spec.options.get("tune_trees", 100)
    res = grid_tune(expand_features(x, spec.features), y, grid, spec.tune_folds, seed, n_trees=n_trees)
    return res.max_depth, res.min_leaf


def score_parts(y, d, t, g_hat, l_hat, p: float, lam: float) -> np.ndarray:
    """theta-free part of the orthogonal score (the score is this minus theta)."""
    c = lam * (1 - lam)
    return ((t - lam) / c * y / p * (d - g_hat) / (1 - g_hat)
            - (d - g_hat) / (c * p * (1 - g_hat)) * l_hat)


def ipw_score_parts(y, d, t, g_hat, p: float, lam: float) -> np.ndarray:
    """theta-free part of the plain inverse-probability-weighted DiD score."""
    return (t - lam) / (lam * (1 - lam)) * y / p * (d - g_hat) / (1 - g_hat)


def dml_atet(sample: DidSample, config: DmlConfig = DmlConfig(), folds: np.ndarray | None = None) -> AtetResult:
    """Cross-fitted ATET; ``p`` and ``lam`` are full-sample shares."""
    sample.check_cells()
    n = len(sample)
    y, d, t, x = sample.y, sample.d, sample.t, sample.x
    p = float(d.mean())
    lam = float(t.mean())
    if folds is None:
        folds = kfold_split(n, config.k_folds, config.seed)
    k_folds = int(folds.max()) + 1

    g_tuned = _tune(config.g_learner, x, d, config.seed)
    l_target = (t - lam) * y
    ctrl = d == 0
    l_tuned = _tune(config.l_learner, x[ctrl], l_target[ctrl], config.seed + 1)

    g_hat = np.empty(n)
    l_hat = np.empty(n)
    diags = []
    for k in range(k_folds):
        test = folds == k
        train = ~test
        tr_ctrl = train & ctrl
        if not tr_ctrl.any():
            raise DmlError(f"fold {k}: no D=0 training rows to fit l0")
        if d[train].min() == d[train].max():
            raise DmlError(f"fold {k}: training rows contain a single treatment arm")
        fs = config.seed * 1000 + k
        g_hat[test] = _fit_predict(config.g_learner, x[train], d[train], x[test], fs, True, g_tuned)
        l_hat[test] = _fit_predict(config.l_learner, x[tr_ctrl], l_target[tr_ctrl], x[test], fs + 500, False,
                                   l_tuned)
        diags.append({"fold": k, "n_test": int(test.sum()), "n_train_control": int(tr_ctrl.sum()),
                      "g_mean": float(g_hat[test].mean()), "l_mean": float(l_hat[test].mean())})
    g_hat = np.clip(g_hat, config.eps_clip, 1 - config.eps_clip)
    keep = g_hat <= 1 - config.trim
    for diag in diags:
        diag["n_trimmed"] = int((~keep & (folds == diag["fold"])).sum())
    n_trim = int((~keep).sum())
    if not keep.any():
        raise DmlError("every row trimmed for lack of overlap")
    a = score_parts(y[keep], d[keep], t[keep], g_hat[keep], l_hat[keep], p, lam)
    theta = float(a.mean())
    psi = a - theta
    m = len(a)
    se = float(np.sqrt(np.mean(psi ** 2) / m))
    z = norm.ppf(0.975)
    return AtetResult(theta, se, (theta - z * se, theta + z * se), m, n_trim, float(psi.mean()),
                      tuple(diags), psi, sample.label)


# ----------------------------------------------------------------------------- checks

def orthogonality_check(sample: DidSample, g0: np.ndarray, l0: np.ndarray, h_g: np.ndarray, h_l: np.ndarray,
                        eps_grid: Sequence[float] = (1e-2, 3e-3, 1e-3), theta: float | None = None,
                        score: str = "orthogonal", p: float | None = None, lam: float | None = None) -> dict:
    """Central finite-difference slope of the mean score along ``(g0, l0) + eps (h_g, h_l)``.

    ``theta`` defaults to the value solving the score at ``(g0, l0)``.
    """
    y, d, t = sample.y, sample.d, sample.t
    p = float(d.mean()) if p is None else p
    lam = float(t.mean()) if lam is None else lam

    def parts(gv, lv):
        if score == "orthogonal":
            return score_parts(y, d, t, gv, lv, p, lam)
        if score == "ipw":
            return ipw_score_parts(y, d, t, gv, p, lam)
        raise ValueError(f"unknown score {score!r}")

    base = parts(g0, l0)
    theta = float(base.mean()) if theta is None else theta
    slopes = []
    for eps in eps_grid:
        up = parts(g0 + eps * h_g, l0 + eps * h_l).mean() - theta
        dn = parts(g0 - eps * h_g, l0 - eps * h_l).mean() - theta
        slopes.append(float((up - dn) / (2 * eps)))
    return {"eps": list(eps_grid), "slopes": slopes, "slope": slopes[-1],
            "score_sd": float((base - theta).std()), "theta": theta}


def linear_did(sample: DidSample, covariates: bool = True) -> dict:
    """OLS of y on (1, D, T, DT, X) with HC1 standard errors.

    Covariate columns that add no rank are dropped and reported.
    """
    sample.check_cells()
    n = len(sample)
    cols = [np.ones(n), sample.d, sample.t, sample.d * sample.t]
    names = ["const", "D", "T", "DT"]
    diagnostics = []
    if covariates:
        for j in range(sample.x.shape[1]):
            cand = np.column_stack(cols + [sample.x[:, j]])
            if np.linalg.matrix_rank(cand) > len(cols):
                cols.append(sample.x[:, j])
                names.append(sample.x_names[j] if j < len(sample.x_names) else f"x{j}")
            else:
                diagnostics.append(f"dropped collinear covariate {sample.x_names[j] if sample.x_names else j}")
    X = np.column_stack(cols)
    fit = fit_ols(X, sample.y)
    beta = fit.coefficients
    resid = sample.y - X @ beta
    k = X.shape[1]
    bread = np.linalg.inv(X.T @ X)
    meat = (X * resid[:, None] ** 2).T @ X
    cov = bread @ meat @ bread * n / (n - k)
    se = np.sqrt(np.diag(cov))
    table = {nm: {"coef": float(b), "se": float(s)} for nm, b, s in zip(names, beta, se)}
    return {"coefficients": table, "did": float(beta[3]), "did_se": float(se[3]),
            "n": n, "diagnostics": diagnostics}


def placebo_reform(table: MotherTable, reform_month: int, shift_months: int,
                   config: DmlConfig = DmlConfig(), window_months: int = 3, event_year: int = 1) -> AtetResult:
    """Re-run the estimator with the cutoff moved ``shift_months`` earlier."""
    sample = build_did_sample(table, reform_month, window_months, shift_months, event_year)
    return replace(dml_atet(sample, config), label=f"placebo_{shift_months}")


def shrink_window(table: MotherTable, reform_month: int, window_months: int,
                  config: DmlConfig = DmlConfig(), event_year: int = 1, min_cell: int = 20) -> AtetResult:
    """Same estimator on narrower birth-month windows."""
    sample = build_did_sample(table, reform_month, window_months, 0, event_year)
    counts = sample.cell_counts()
    if min(counts.values()) < min_cell:
        raise DmlError(f"cell too small for window {window_months}: {counts}")
    return replace(dml_atet(sample, config), label=f"window_{window_months}")


def per_event_year(table: MotherTable, reform_month: int, config: DmlConfig = DmlConfig(),
                   window_months: int = 3, shift_months: int = 0) -> dict[int, AtetResult]:
    """One ATET per event-year outcome."""
    return {k: dml_atet(build_did_sample(table, reform_month, window_months, shift_months, k), config)
            for k in sorted(table.y)}


def loo_oracle(sample: DidSample, g_fit: Callable, l_fit: Callable) -> float:
    """Straight-line leave-one-out estimate: each row's nuisances come from all other rows."""
    n = len(sample)
    y, d, t, x = sample.y, sample.d, sample.t, sample.x
    p, lam = float(d.mean()), float(t.mean())
    total = 0.0
    for i in range(n):
        others = np.arange(n) != i
        g_i = g_fit(x[others], d[others], x[i:i + 1])[0]
        ctrl = others & (d == 0)
        l_i = l_fit(x[ctrl], (t[ctrl] - lam) * y[ctrl], x[i:i + 1])[0]
        total += float(score_parts(y[i], d[i], t[i], g_i, l_i, p, lam))
    return total / n
