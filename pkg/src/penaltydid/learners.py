"""Nuisance learners: IRLS logit, QR least squares, k-fold splits.

The random forest lives in :mod:`penaltydid.forest`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

from .forest import ForestConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("design matrix must be 2-D")
        if v.shape[1] != len(self.feature_names):
            raise ValueError("one feature name per column")
        if not np.isfinite(v).all():
            raise ValueError("design matrix has non-finite entries")
        if "intercept" in self.feature_names:
            j = self.feature_names.index("intercept")
            if not np.all(v[:, j] == 1.0):
                raise ValueError("intercept column must be constant 1")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def rows(self, idx) -> "DesignMatrix":
        return DesignMatrix(self.values[idx], self.feature_names)


def make_design(columns: Mapping[str, np.ndarray] | None = None, n: int | None = None,
                intercept: bool = True) -> DesignMatrix:
    """Stack named columns, intercept first."""
    columns = dict(columns or {})
    if n is None:
        if not columns:
            raise ValueError("need n for an intercept-only design")
        n = len(next(iter(columns.values())))
    names, cols = [], []
    if intercept:
        names.append("intercept")
        cols.append(np.ones(n))
    for k, v in columns.items():
        names.append(k)
        cols.append(np.asarray(v, dtype=np.float64))
    return DesignMatrix(np.column_stack(cols) if cols else np.empty((n, 0)), tuple(names))


def _values(X) -> np.ndarray:
    return X.values if isinstance(X, DesignMatrix) else np.asarray(X, dtype=np.float64)


# ----------------------------------------------------------------------------- logit

@dataclass(frozen=True)
class LogitFit:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    loglik_path: tuple[float, ...] = ()
    diagnostics: tuple[str, ...] = ()


def logit_loglik(beta, X, y) -> float:
    eta = _values(X) @ beta
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def logit_gradient(beta, X, y) -> np.ndarray:
    """Mean score of the Bernoulli log-likelihood."""
    X = _values(X)
    return X.T @ (y - expit(X @ beta)) / len(y)


def fit_logit(X, y, tol: float = 1e-8, max_iter: int = 50, coef_bound: float = 1e4) -> LogitFit:
    """Maximum-likelihood logit by Newton/IRLS with step halving.

    Convergence is judged on the Euclidean norm of the mean score.
    """
    X = _values(X)
    y = np.asarray(y, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("logit response must be 0/1")
    n, k = X.shape
    if n <= k:
        raise ValueError(f"need more rows than columns (n={n}, k={k})")
    beta = np.zeros(k)
    ll = logit_loglik(beta, X, y)
    path = [ll]
    diagnostics: list[str] = []
    grad = logit_gradient(beta, X, y)
    gnorm = float(np.linalg.norm(grad))
    it = 0
    while gnorm > tol and it < max_iter:
        it += 1
        p = expit(X @ beta)
        w = p * (1 - p)
        H = (X * w[:, None]).T @ X / n
        try:
            if np.linalg.cond(H) > 1e12:
                raise np.linalg.LinAlgError("ill-conditioned")
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            ridge = 1e-8 * max(np.trace(H) / k, 1e-12)
            step = np.linalg.solve(H + ridge * np.eye(k), grad)
            if not diagnostics or not diagnostics[-1].startswith("singular"):
                diagnostics.append(f"singular weighted normal equations at iteration {it}; ridge {ridge:.1e}")
        scale = 1.0
        new = beta + step
        new_ll = logit_loglik(new, X, y)
        # predicted gain below loglik rounding: halving would only chase noise
        tiny = 0.5 * n * float(grad @ step) <= 1e-13 * (1.0 + abs(ll))
        while new_ll < ll and scale > 1e-10 and not tiny:
            scale /= 2
            new = beta + scale * step
            new_ll = logit_loglik(new, X, y)
        if new_ll < ll and not tiny:
            diagnostics.append("no ascent direction found")
            break
        beta, ll = new, new_ll
        path.append(ll)
        grad = logit_gradient(beta, X, y)
        gnorm = float(np.linalg.norm(grad))
        if np.linalg.norm(beta) > coef_bound:
            diagnostics.append(f"quasi-separation: coefficient norm exceeded {coef_bound:g}")
            return LogitFit(beta, False, it, gnorm, tuple(path), tuple(diagnostics))
    return LogitFit(beta, gnorm <= tol, it, gnorm, tuple(path), tuple(diagnostics))


def predict_proba(fit: LogitFit | np.ndarray, X, eps_clip: float = 1e-6) -> np.ndarray:
    beta = fit.coefficients if isinstance(fit, LogitFit) else np.asarray(fit)
    return np.clip(expit(_values(X) @ beta), eps_clip, 1 - eps_clip)


# ----------------------------------------------------------------------------- ols

@dataclass(frozen=True)
class OlsFit:
    coefficients: np.ndarray
    residual_variance: float
    rank: int
    diagnostics: tuple[str, ...] = ()

    def predict(self, X) -> np.ndarray:
        return _values(X) @ self.coefficients


def fit_ols(X, y) -> OlsFit:
    """Least squares through a QR factorisation; minimum-norm SVD solve if rank deficient."""
    X = _values(X)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    if n <= k:
        raise ValueError(f"need more rows than columns (n={n}, k={k})")
    diagnostics = ()
    Q, R = np.linalg.qr(X)
    d = np.abs(np.diag(R))
    if k and d.min() > 1e-10 * max(d.max(), 1.0):
        beta = np.linalg.solve(R, Q.T @ y)
        rank = k
    else:
        beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
        diagnostics = (f"rank-deficient design (rank {rank} of {k}); minimum-norm solution",)
    resid = y - X @ beta
    return OlsFit(beta, float(resid @ resid / max(n - rank, 1)), int(rank), diagnostics)


# ----------------------------------------------------------------------------- folds

def kfold_split(n: int, k: int, seed) -> np.ndarray:
    """Fold label per row: a uniform random permutation dealt round-robin."""
    if k < 2 or n < k:
        raise ValueError(f"need 2 <= k <= n (k={k}, n={n})")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


@dataclass(frozen=True)
class LearnerSpec:
    """Which nuisance model to fit and with what settings.

    ``kind`` is 'forest', 'logit', 'ols' or 'mean' (training-sample mean).
    ``features`` optionally transforms covariates (see :func:`expand_features`).
    """

    kind: str = "forest"
    features: str = "linear"
    forest: ForestConfig | None = None
    grid: Sequence[tuple[int, int]] | None = None
    tune_folds: int = 3
    options: dict = field(default_factory=dict)


def expand_features(x: np.ndarray, features: str = "linear") -> np.ndarray:
    """Covariate basis: 'none', 'linear' (x) or 'quadratic' (x, x^2)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if features == "none":
        return np.empty((len(x), 0))
    if features == "linear":
        return x
    if features == "quadratic":
        return np.column_stack([x, x ** 2])
    raise ValueError(f"unknown feature basis {features!r}")

