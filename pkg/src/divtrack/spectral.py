"""Spectral clustering of assets into a one-hot assignment matrix."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .stats import AffinityMatrix, affinity_matrix, constant_columns, median_heuristic

__all__ = [
    "ClusteringError",
    "ClusterModel",
    "SpectralEmbedding",
    "normalized_laplacian",
    "symmetric_eigendecomposition",
    "eigengap_select_k",
    "spectral_embed",
    "kmeans",
    "assignment_matrix",
    "cluster_assets",
]

DEFAULT_K_MAX = 30


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterModel:
    """One-hot cluster assignment ``Z`` (K x N) with its labels and sizes."""

    Z: np.ndarray
    K: int
    sizes: np.ndarray
    labels: np.ndarray
    sigma: float | None = None
    eigenvalues: np.ndarray | None = field(default=None, repr=False)
    excluded: tuple[int, ...] = ()  # constant columns, each given its own cluster

    @property
    def N(self) -> int:
        return self.Z.shape[1]

    @property
    def similarity(self) -> np.ndarray:
        """``A = Z'Z``: 1 where two assets share a cluster."""
        return self.Z.T @ self.Z


@dataclass(frozen=True)
class SpectralEmbedding:
    H: np.ndarray  # K x N, unit-norm columns
    eigenvalues: np.ndarray  # all eigenvalues of L, descending


def normalized_laplacian(S, names=None) -> np.ndarray:
    """``L = D^{-1/2} S D^{-1/2}`` with ``D`` the diagonal of row sums of ``S``."""
    S = np.asarray(S.S if isinstance(S, AffinityMatrix) else S, dtype=float)
    deg = S.sum(axis=1)
    isolated = np.flatnonzero(~(deg > 0))
    if isolated.size:
        i = int(isolated[0])
        who = names[i] if names is not None else f"asset {i}"
        raise ClusteringError(f"isolated vertex: {who} has zero total affinity")
    r = 1.0 / np.sqrt(deg)
    L = S * r[:, None] * r[None, :]
    return 0.5 * (L + L.T)


def symmetric_eigendecomposition(M, sym_tol: float = 1e-10):
    """Eigen-pairs of a symmetric matrix, eigenvalues descending.

    Each eigenvector's sign is fixed so that its largest-magnitude entry is
    positive. Returns ``(eigenvalues, V)`` with eigenvectors in the columns
    of ``V``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    scale = max(1.0, float(np.abs(M).max(initial=0.0)))
    if np.abs(M - M.T).max(initial=0.0) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    try:
        w, V = np.linalg.eigh(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise ClusteringError(f"eigensolver did not converge: {exc}") from exc
    w = w[::-1].copy()
    V = V[:, ::-1].copy()
    if V.size:
        lead = np.abs(V).argmax(axis=0)
        signs = np.sign(V[lead, np.arange(V.shape[1])])
        signs[signs == 0] = 1.0
        V *= signs
    return w, V


def eigengap_select_k(eigenvalues, k_max: int, k_min: int = 2) -> int:
    """Cluster count maximising the gap ``lambda_k - lambda_{k+1}``.

    ``eigenvalues`` are those of ``L`` sorted descending; ``k`` ranges over
    ``[k_min, k_max]`` and ties go to the smallest ``k``. The default
    ``k_min=2`` skips the gap after the leading eigenvalue, which equals 1
    for every connected graph and so says nothing about cluster structure.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size < 2:
        raise ValueError("need at least 2 eigenvalues")
    if not 1 <= k_max < lam.size:
        raise ValueError(f"k_max must lie in [1, {lam.size - 1}], got {k_max}")
    k_lo = max(1, min(k_min, k_max))
    gaps = lam[k_lo - 1:k_max] - lam[k_lo:k_max + 1]
    return int(k_lo + np.argmax(gaps))


def spectral_embed(L, K: int, decomposition=None) -> SpectralEmbedding:
    """Top-``K`` eigenvectors of ``L`` stacked as rows, columns scaled to unit norm."""
    L = np.asarray(L, dtype=float)
    n = L.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    w, V = decomposition if decomposition is not None else symmetric_eigendecomposition(L)
    H = V[:, :K].T.copy()
    norms = np.linalg.norm(H, axis=0)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise ClusteringError(f"degenerate embedding: column {int(bad[0])} has zero norm")
    return SpectralEmbedding(H=H / norms, eigenvalues=w)


def _kmeanspp(points, K, rng):
    n = points.shape[0]
    centres = np.empty((K, points.shape[1]))
    centres[0] = points[rng.integers(n)]
    d2 = ((points - centres[0]) ** 2).sum(axis=1)
    for c in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = int(np.argmax(d2))
        centres[c] = points[idx]
        d2 = np.minimum(d2, ((points - centres[c]) ** 2).sum(axis=1))
    return centres


def _sq_dists(points, centres):
    return ((points[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)


def _lloyd(points, centres, max_iters):
    K = centres.shape[0]
    labels = None
    for _ in range(max_iters):
        d2 = _sq_dists(points, centres)
        new = d2.argmin(axis=1)
        # repair empty clusters with the point farthest from its centre
        counts = np.bincount(new, minlength=K)
        for k in np.flatnonzero(counts == 0):
            own = d2[np.arange(len(new)), new]
            movable = counts[new] > 1
            far = int(np.argmax(np.where(movable, own, -1.0)))
            counts[new[far]] -= 1
            new[far] = k
            counts[k] = 1
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centres = np.stack([points[labels == k].mean(axis=0) for k in range(K)])
    inertia = float(((points - centres[labels]) ** 2).sum())
    return labels, inertia


def _canonical(labels):
    """Relabel clusters in order of first appearance."""
    mapping = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping))
    return np.array([mapping[int(lab)] for lab in labels], dtype=int)


def kmeans(H, K: int, seed: int = 0, restarts: int = 10, max_iters: int = 300) -> np.ndarray:
    """k-means over the columns of ``H`` (each column is one asset).

    k-means++ seeding, ``restarts`` independent runs from one seeded
    generator, best run by within-cluster sum of squares (earliest run wins
    ties). Labels are renumbered by first appearance.
    """
    H = np.asarray(getattr(H, "H", H), dtype=float)
    points = H.T
    n = points.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    if np.unique(points, axis=0).shape[0] < K:
        raise ClusteringError(f"fewer than K={K} distinct points")
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        labels, inertia = _lloyd(points, _kmeanspp(points, K, rng), max_iters)
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return _canonical(best_labels)


def assignment_matrix(labels, N: int | None = None, K: int | None = None, **extra) -> ClusterModel:
    """One-hot ``Z`` with ``Z[k, j] = 1`` iff ``labels[j] == k``."""
    labels = np.asarray(labels, dtype=int)
    N = labels.size if N is None else N
    if labels.shape != (N,):
        raise ValueError(f"expected {N} labels, got {labels.size}")
    K = int(labels.max()) + 1 if K is None else K
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    Z = np.zeros((K, N))
    Z[labels, np.arange(N)] = 1.0
    sizes = Z.sum(axis=1).astype(int)
    empty = np.flatnonzero(sizes == 0)
    if empty.size:
        raise ClusteringError(f"cluster {int(empty[0])} is empty")
    return ClusterModel(Z=Z, K=K, sizes=sizes, labels=labels, **extra)


def cluster_assets(
    X,
    sigma: float | None = None,
    k: int | None = None,
    seed: int = 0,
    k_max: int | None = None,
    k_min: int = 2,
    restarts: int = 10,
    max_iters: int = 300,
) -> ClusterModel:
    """Spectral clustering of the columns of a returns matrix.

    Parameters
    ----------
    X : ReturnsMatrix or ndarray
        D x N log returns.
    sigma, k : optional
        Override the median-heuristic bandwidth and the eigengap cluster count.
    seed : int
        Seed for k-means.
    k_max : int, optional
        Largest K considered by the eigengap search, default ``min(30, N - 1)``.

    Constant columns have no rank correlation; each is placed in a cluster of
    its own (appended after the spectral clusters) and listed in
    ``excluded``.
    """
    X = np.asarray(getattr(X, "X", X), dtype=float)
    n = X.shape[1]
    const = constant_columns(X)
    usable = np.setdiff1d(np.arange(n), const)
    if usable.size < 2:
        raise ClusteringError("need at least 2 non-constant assets to cluster")
    Xu = X[:, usable]

    if sigma is None:
        sigma = median_heuristic(Xu, seed=seed)
    S = affinity_matrix(Xu, sigma)
    L = normalized_laplacian(S, names=[f"asset {j}" for j in usable])
    w, V = symmetric_eigendecomposition(L)
    if k is None:
        km = min(DEFAULT_K_MAX, usable.size - 1) if k_max is None else k_max
        k = eigengap_select_k(w, k_max=km, k_min=k_min)
    emb = spectral_embed(L, k, decomposition=(w, V))
    sub = kmeans(emb.H, k, seed=seed, restarts=restarts, max_iters=max_iters)

    labels = np.empty(n, dtype=int)
    labels[usable] = sub
    labels[const] = k + np.arange(const.size)
    return assignment_matrix(
        labels,
        n,
        k + const.size,
        sigma=float(sigma),
        eigenvalues=w,
        excluded=tuple(int(j) for j in const),
    )
