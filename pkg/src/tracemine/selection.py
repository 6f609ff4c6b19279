"""Choosing encoder target variables by a PCA / extra-trees / RFE vote."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, InvariantError


def standardize(x: np.ndarray):
    """Column z-scores with population std. Constant columns become zeros.

    Returns ``(z, mean, std)``; ``std == 0`` marks the flagged columns.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("standardize needs a 2-d matrix with at least 2 rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    # relative floor: float noise on a constant column must not count as variance
    std = np.where(std <= 1e-12 * np.maximum(1.0, np.abs(mean)), 0.0, std)
    safe = np.where(std > 0, std, 1.0)
    z = np.where(std > 0, (x - mean) / safe, 0.0)
    return z, mean, std


def pca_spectrum(z: np.ndarray):
    """Eigenvalues (descending) and eigenvectors (columns) of the covariance."""
    cov = np.cov(z, rowvar=False, ddof=1).reshape(z.shape[1], z.shape[1])
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    return np.clip(vals[order], 0.0, None), vecs[:, order]


def pca_scores(z: np.ndarray, n_components: int | None = None, variance_target: float = 0.9) -> np.ndarray:
    """Variance-weighted absolute loadings per feature.

    With ``n_components=None`` the smallest number of components reaching
    ``variance_target`` of the total variance is used.
    """
    vals, vecs = pca_spectrum(z)
    total = vals.sum()
    if total <= 0:
        return np.zeros(z.shape[1])
    ratio = vals / total
    if n_components is None:
        n_components = int(np.searchsorted(np.cumsum(ratio), variance_target - 1e-12) + 1)
    n_components = max(1, min(n_components, z.shape[1]))
    return np.abs(vecs[:, :n_components]) @ ratio[:n_components]


# extra-trees ---------------------------------------------------------------


def _grow(x, y, idx, depth, rng, imp, max_depth, min_leaf, max_features):
    n = idx.size
    if depth >= max_depth or n < 2 * min_leaf:
        return
    yy = y[idx]
    var = yy.var()
    if var <= 0:
        return
    xs = x[idx]
    lo, hi = xs.min(axis=0), xs.max(axis=0)
    candidates = np.flatnonzero(hi > lo)
    if candidates.size == 0:
        return
    for _ in range(10):
        feats = rng.choice(candidates, size=min(max_features, candidates.size), replace=False)
        best = None
        for f in feats:
            thr = rng.uniform(lo[f], hi[f])
            left = xs[:, f] <= thr
            nl = int(left.sum())
            if nl < min_leaf or n - nl < min_leaf:
                continue
            gain = n * var - nl * yy[left].var() - (n - nl) * yy[~left].var()
            if best is None or gain > best[0]:
                best = (gain, f, left)
        if best is not None:
            break
    else:
        return
    gain, f, left = best
    imp[f] += gain
    _grow(x, y, idx[left], depth + 1, rng, imp, max_depth, min_leaf, max_features)
    _grow(x, y, idx[~left], depth + 1, rng, imp, max_depth, min_leaf, max_features)


def extra_trees_importance(x: np.ndarray, y: np.ndarray, n_trees: int = 100, max_depth: int = 12,
                           min_leaf: int = 5, max_features: int = 1, seed: int = 0) -> np.ndarray:
    """Impurity-decrease importances from an ensemble of randomized trees.

    Each split draws ``max_features`` candidate features and one uniform
    threshold per feature (``max_features=1`` gives totally randomized trees).
    Importances are normalized to sum to 1 unless no split happened.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] < 2:
        raise DataError("extra-trees needs at least 2 samples")
    imp = np.zeros(x.shape[1])
    for child in np.random.SeedSequence(seed).spawn(n_trees):
        tree_imp = np.zeros(x.shape[1])
        _grow(x, y, np.arange(x.shape[0]), 0, np.random.default_rng(child), tree_imp,
              max_depth, min_leaf, max_features)
        imp += tree_imp
    total = imp.sum()
    return imp / total if total > 0 else imp


def rfe_linear_rank(x: np.ndarray, y: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    """Rank per feature; 1 is the feature kept longest.

    Each round fits ridge-stabilized least squares on the surviving columns
    and drops the one with the smallest absolute coefficient.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    p = x.shape[1]
    xc = x - x.mean(axis=0)
    yc = y - y.mean()
    alive = list(range(p))
    rank = np.zeros(p, dtype=int)
    while alive:
        coef = ridge_coefficients(xc[:, alive], yc, ridge)
        drop = alive[int(np.argmin(np.abs(coef)))]
        rank[drop] = len(alive)
        alive.remove(drop)
    return rank


def ridge_coefficients(x: np.ndarray, y: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    k = x.shape[1]
    aug_x = np.vstack([x, np.sqrt(ridge) * np.eye(k)])
    aug_y = np.concatenate([y, np.zeros(k)])
    coef, *_ = np.linalg.lstsq(aug_x, aug_y, rcond=None)
    if not np.all(np.isfinite(coef)):
        corr = np.corrcoef(x, rowvar=False)
        pairs = [(i, j) for i in range(k) for j in range(i + 1, k) if abs(corr[i, j]) > 1 - 1e-12]
        raise DataError(f"least squares failed; collinear column pairs {pairs}")
    return coef


# voting --------------------------------------------------------------------


@dataclass
class SelectionResult:
    rankings: dict[str, list[str]]
    scores: dict[str, dict[str, float]]
    chosen_targets: list[str]
    k: int = 5
    flagged_constant: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rankings": self.rankings,
            "scores": self.scores,
            "chosen_targets": self.chosen_targets,
            "k": self.k,
            "flagged_constant": self.flagged_constant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        return cls(d["rankings"], d["scores"], list(d["chosen_targets"]), d.get("k", 5),
                   list(d.get("flagged_constant", [])))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SelectionResult":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _ranked(names, scores):
    # descending score, ties by name so the order never depends on column order
    return [names[i] for i in sorted(range(len(names)), key=lambda i: (-scores[i], names[i]))]


def select_targets(features: np.ndarray, runtime: np.ndarray, names: Sequence[str], k: int = 5,
                   seed: int = 0, extra_trees_params: dict | None = None) -> SelectionResult:
    """Union of the top-``k`` features under PCA, extra-trees and RFE.

    Columns are put in name order before fitting, so the outcome does not
    depend on how the caller ordered them.
    """
    names = list(names)
    if "runtime_s" in names:
        raise DataError("runtime must not be among the candidate features")
    order = sorted(range(len(names)), key=lambda i: names[i])
    names = [names[i] for i in order]
    x = np.asarray(features, dtype=float)[:, order]
    z, _, std = standardize(x)
    y = np.asarray(runtime, dtype=float)

    pca = pca_scores(z)
    trees = extra_trees_importance(z, y, seed=seed, **(extra_trees_params or {}))
    rfe = rfe_linear_rank(z, y)
    score_sets = {"pca": pca, "extra_trees": trees, "rfe": -rfe.astype(float)}
    rankings = {tech: _ranked(names, s) for tech, s in score_sets.items()}
    chosen = set()
    for ranked in rankings.values():
        chosen.update(ranked[:k])
    if not k <= len(chosen) <= 3 * k:
        raise InvariantError(f"vote produced {len(chosen)} targets")
    scores = {
        "pca": dict(zip(names, map(float, pca))),
        "extra_trees": dict(zip(names, map(float, trees))),
        "rfe": dict(zip(names, map(float, rfe))),
    }
    flagged = [nm for nm, s in zip(names, std) if s == 0]
    return SelectionResult(rankings, scores, sorted(chosen), k, flagged)
