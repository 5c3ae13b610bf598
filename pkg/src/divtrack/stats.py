"""Rank-correlation distances and Gaussian affinity matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "UndefinedCorrelationError",
    "AffinityMatrix",
    "spearman_rho",
    "rank_distance",
    "spearman_matrix",
    "distance_matrix",
    "constant_columns",
    "median_heuristic",
    "affinity_matrix",
]

# exact pairwise median up to this many assets, sampled above it
MAX_EXACT_ASSETS = 2000
N_SAMPLED_PAIRS = 1_000_000


class UndefinedCorrelationError(ValueError):
    """Rank correlation is undefined because an input has no variation."""


@dataclass(frozen=True)
class AffinityMatrix:
    S: np.ndarray
    sigma: float


def _matrix(X) -> np.ndarray:
    return np.asarray(getattr(X, "X", X), dtype=float)


def _standardised_ranks(X: np.ndarray) -> np.ndarray:
    """Column ranks centred and scaled to unit norm (mid-ranks for ties)."""
    R = rankdata(X, method="average", axis=0)
    R = R - R.mean(axis=0)
    norms = np.linalg.norm(R, axis=0)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise UndefinedCorrelationError(f"constant column(s) {bad.tolist()}")
    return R / norms


def spearman_rho(x, y) -> float:
    """Spearman's rank correlation: Pearson correlation of average ranks.

    Raises
    ------
    UndefinedCorrelationError
        If either input is constant.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    R = _standardised_ranks(np.column_stack([x, y]))
    return float(np.clip(R[:, 0] @ R[:, 1], -1.0, 1.0))


def rank_distance(x, y) -> float:
    """``sqrt(2 (1 - rho))`` with rho the Spearman correlation; lies in [0, 2]."""
    return float(np.sqrt(max(2.0 * (1.0 - spearman_rho(x, y)), 0.0)))


def constant_columns(X) -> np.ndarray:
    """Indices of columns with no variation."""
    X = _matrix(X)
    return np.flatnonzero(np.all(X == X[:1], axis=0))


def spearman_matrix(X) -> np.ndarray:
    """Pairwise Spearman correlations between the columns of ``X``."""
    R = _standardised_ranks(_matrix(X))
    C = R.T @ R
    np.clip(C, -1.0, 1.0, out=C)
    np.fill_diagonal(C, 1.0)
    return C


def distance_matrix(X) -> np.ndarray:
    """Pairwise rank distances ``sqrt(2 (1 - rho_ij))`` between columns."""
    return np.sqrt(np.maximum(2.0 * (1.0 - spearman_matrix(X)), 0.0))


def median_heuristic(X, seed: int = 0) -> float:
    """Median of the rank distances over all unordered column pairs.

    Exact for up to ``MAX_EXACT_ASSETS`` columns; above that the median of
    ``N_SAMPLED_PAIRS`` uniformly drawn distinct pairs (seeded).
    """
    X = _matrix(X)
    n = X.shape[1]
    if n < 2:
        raise ValueError("median heuristic needs at least 2 assets")
    if n <= MAX_EXACT_ASSETS:
        D = distance_matrix(X)
        d = D[np.triu_indices(n, k=1)]
    else:
        R = _standardised_ranks(X)
        rng = np.random.default_rng(seed)
        i = rng.integers(0, n, N_SAMPLED_PAIRS)
        j = rng.integers(0, n - 1, N_SAMPLED_PAIRS)
        j = j + (j >= i)  # distinct from i
        d = np.empty(N_SAMPLED_PAIRS)
        for lo in range(0, N_SAMPLED_PAIRS, 50_000):
            hi = lo + 50_000
            rho = np.einsum("ij,ij->j", R[:, i[lo:hi]], R[:, j[lo:hi]])
            d[lo:hi] = np.sqrt(np.maximum(2.0 * (1.0 - np.clip(rho, -1, 1)), 0.0))
    sigma = float(np.median(d))
    if sigma <= 0:
        raise ValueError("degenerate universe: median pairwise distance is zero")
    return sigma


def affinity_matrix(X, sigma: float) -> AffinityMatrix:
    """Gaussian affinity ``exp(-d_ij^2 / sigma^2)`` with a zero diagonal."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    D = distance_matrix(X)
    S = np.exp(-(D**2) / sigma**2)
    np.fill_diagonal(S, 0.0)
    S = 0.5 * (S + S.T)
    return AffinityMatrix(S=S, sigma=float(sigma))
