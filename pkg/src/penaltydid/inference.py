"""Standard errors and simultaneous bands from influence functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

IQR_TO_SD = 2 * norm.ppf(0.75)
_CHUNK = 256


@dataclass(frozen=True, eq=False)
class BandResult:
    pointwise_se: np.ndarray
    critical_value: float
    coverage_level: float
    n_draws: int
    excluded: tuple[int, ...] = ()
    diagnostics: tuple[str, ...] = ()


def pointwise_se(influence: np.ndarray) -> np.ndarray:
    """sd(IF[:, t]) / sqrt(n), population sd."""
    influence = np.asarray(influence, dtype=np.float64)
    if influence.ndim == 1:
        influence = influence[:, None]
    n = influence.shape[0]
    if n < 2:
        raise ValueError("need at least two units")
    return influence.std(axis=0) / np.sqrt(n)


def _multipliers(rng: np.random.Generator, size, kind: str) -> np.ndarray:
    if kind == "rademacher":
        return rng.integers(0, 2, size=size).astype(np.float64) * 2.0 - 1.0
    if kind == "mammen":
        s5 = np.sqrt(5.0)
        lo, hi = (1 - s5) / 2, (1 + s5) / 2
        p_lo = (s5 + 1) / (2 * s5)
        return np.where(rng.random(size) < p_lo, lo, hi)
    raise ValueError(f"unknown multiplier {kind!r}")


def bootstrap_draws(influence: np.ndarray, n_draws: int, seed, multiplier: str = "rademacher") -> np.ndarray:
    """``sqrt(n) * mean_i xi_i IF_i(t)`` for each draw, shape ``(n_draws, T)``.

    Multipliers are generated in fixed-size chunks from one generator, so the
    draws do not depend on memory limits or thread counts.
    """
    influence = np.asarray(influence, dtype=np.float64)
    n = influence.shape[0]
    rng = np.random.default_rng(seed)
    out = np.empty((n_draws, influence.shape[1]))
    for start in range(0, n_draws, _CHUNK):
        b = min(_CHUNK, n_draws - start)
        xi = _multipliers(rng, (b, n), multiplier)
        out[start:start + b] = xi @ influence / np.sqrt(n)
    return out


def multiplier_bootstrap(influence: np.ndarray, n_draws: int = 999, seed=0,
                         multiplier: str = "rademacher", level: float = 0.95) -> BandResult:
    """Uniform critical value via the multiplier bootstrap.

    Each coordinate is studentised by its bootstrap IQR rescaled to a normal
    sd; the critical value is the ``level`` quantile of the max absolute
    studentised draw. Zero-scale coordinates are left out of the max.
    """
    influence = np.asarray(influence, dtype=np.float64)
    if influence.ndim == 1:
        influence = influence[:, None]
    n, T = influence.shape
    if n < 2:
        raise ValueError("need at least two units")
    if n_draws < 199:
        raise ValueError("n_draws must be >= 199")
    draws = bootstrap_draws(influence, n_draws, seed, multiplier)
    q75, q25 = np.quantile(draws, [0.75, 0.25], axis=0, method="inverted_cdf")
    scale = (q75 - q25) / IQR_TO_SD
    degenerate = ~(scale > 0)
    diagnostics = []
    if degenerate.any():
        diagnostics.append(f"{int(degenerate.sum())} zero-variance column(s) excluded from the max")
    keep = ~degenerate
    if keep.any():
        tmax = np.max(np.abs(draws[:, keep]) / scale[keep], axis=1)
        crit = float(np.quantile(tmax, level, method="inverted_cdf"))
    else:
        crit = float(norm.ppf(0.5 + level / 2))
        diagnostics.append("no informative column; normal quantile used")
    se = np.where(degenerate, 0.0, scale) / np.sqrt(n)
    return BandResult(se, crit, level, n_draws, tuple(np.flatnonzero(degenerate).tolist()), tuple(diagnostics))


def coverage_study(dgp_config, estimator_config=None, n_reps: int = 200, seed: int = 0,
                   event_window: tuple[int, int] = (-24, 36), n_draws: int = 999) -> dict:
    """Monte Carlo coverage of pointwise and uniform bands against the DGP's true path."""
    from .did import DidConfig
    from .simgen import dr_event_study_estimator, monte_carlo_run

    if n_reps < 100:
        raise ValueError("coverage_study needs n_reps >= 100")
    estimator = dr_event_study_estimator(estimator_config or DidConfig(), event_window, n_draws)
    table = monte_carlo_run(dgp_config, estimator, n_reps, seed)
    return {
        "n_reps": table["n_reps"],
        "n_failed": table["n_failed"],
        "uniform_coverage": table["uniform_coverage"],
        "uniform_coverage_mcse": table["uniform_coverage_mcse"],
        "event_times": table["event_times"],
        "pointwise_coverage": table["pointwise_coverage"],
        "pointwise_coverage_mcse": table["pointwise_coverage_mcse"],
    }
