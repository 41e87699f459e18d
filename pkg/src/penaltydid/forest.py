"""Bagged CART regression forests on binned features, plus grid tuning.

Features are binned once per fit (exact when a column has at most
``max_bins`` distinct values, quantile edges otherwise); trees are grown by
the compiled kernel or its NumPy twin.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

from ._backend import get_kernels

DEFAULT_GRID = tuple(product((3, 5, 8), (5, 20, 50)))


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 1000
    max_depth: int = 5
    min_leaf: int = 20
    seed: int = 0
    max_bins: int = 255


def bin_edges(X: np.ndarray, max_bins: int = 255) -> list[np.ndarray]:
    edges = []
    for col in np.asarray(X, dtype=np.float64).T:
        u = np.unique(col)
        if len(u) <= max_bins:
            e = (u[:-1] + u[1:]) / 2
        else:
            q = np.quantile(col, np.arange(1, max_bins) / max_bins)
            e = np.unique(q)
        edges.append(e)
    return edges


def apply_bins(X: np.ndarray, edges: Sequence[np.ndarray]) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    out = np.empty(X.shape, dtype=np.uint8)
    for j, e in enumerate(edges):
        # x <= edge goes left, matching the split rule code <= split_bin
        out[:, j] = np.searchsorted(e, X[:, j], side="left")
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    split_bin: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    weight: np.ndarray

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)


@dataclass(frozen=True, eq=False)
class ForestFit:
    trees: tuple[Tree, ...]
    edges: tuple[np.ndarray, ...]
    config: ForestConfig
    y_range: tuple[float, float]

    @property
    def max_depth(self) -> int:
        return self.config.max_depth

    @property
    def min_leaf_size(self) -> int:
        return self.config.min_leaf

    feature_subsample_rule = "all"

    def predict(self, X, backend: str | None = None) -> np.ndarray:
        xb = apply_bins(X, self.edges)
        k = get_kernels(backend)
        sizes = [len(t.feature) for t in self.trees]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        cat = lambda name, dt: np.ascontiguousarray(  # noqa: E731
            np.concatenate([getattr(t, name) for t in self.trees]), dtype=dt)
        return k.predict_forest(xb, cat("feature", np.int32), cat("split_bin", np.int32),
                                cat("left", np.int32), cat("right", np.int32),
                                cat("value", np.float64), offsets)


def fit_forest(X, y, config: ForestConfig = ForestConfig(), backend: str | None = None) -> ForestFit:
    """Bagged regression trees with variance-reduction splits, all features per split.

    Tree ``t`` draws its bootstrap from ``default_rng([seed, t])``, so the fit
    does not depend on the kernel backend or on evaluation order.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n < 2 * config.min_leaf:
        raise ValueError(f"need n >= 2*min_leaf (n={n}, min_leaf={config.min_leaf})")
    edges = bin_edges(X, config.max_bins)
    xb = apply_bins(X, edges)
    n_bins = np.array([len(e) + 1 for e in edges], dtype=np.int32)
    k = get_kernels(backend)
    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng([config.seed, t])
        counts = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.int32)
        trees.append(Tree(*k.build_tree(xb, n_bins, y, counts, config.max_depth, config.min_leaf)))
    return ForestFit(tuple(trees), tuple(edges), config, (float(y.min()), float(y.max())))


def cv_mse(X, y, max_depth: int, min_leaf: int, folds: np.ndarray, n_trees: int, seed: int) -> float:
    """Cross-validated MSE of one forest configuration over fixed fold labels."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64)
    sse = 0.0
    for f in np.unique(folds):
        test = folds == f
        cfg = ForestConfig(n_trees=n_trees, max_depth=max_depth, min_leaf=min_leaf, seed=seed)
        fit = fit_forest(X[~test], y[~test], cfg)
        r = y[test] - fit.predict(X[test])
        sse += float(r @ r)
    return sse / len(y)


@dataclass(frozen=True)
class TuneResult:
    max_depth: int
    min_leaf: int
    scores: dict


def grid_tune(X, y, grid: Sequence[tuple[int, int]] = DEFAULT_GRID, k_folds: int = 3,
              seed: int = 0, n_trees: int = 100) -> TuneResult:
    """Pick ``(max_depth, min_leaf)`` minimising k-fold CV MSE.

    Ties go to the smaller depth, then the larger leaf size.
    """
    from .learners import kfold_split

    grid = list(grid)
    if not grid:
        raise ValueError("empty tuning grid")
    if k_folds < 2:
        raise ValueError("k_folds must be >= 2")
    folds = kfold_split(len(y), k_folds, seed)
    n_min_train = min(int((folds != f).sum()) for f in range(k_folds))
    scores = {}
    for depth, leaf in grid:
        if n_min_train < 2 * leaf:
            continue
        scores[(depth, leaf)] = cv_mse(X, y, depth, leaf, folds, n_trees, seed)
    if not scores:
        raise ValueError("no grid point is feasible for this sample size")
    best = min(scores, key=lambda c: (scores[c], c[0], -c[1]))
    return TuneResult(best[0], best[1], scores)
