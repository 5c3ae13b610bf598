"""Tracking objectives: baseline, ridge, sector and cluster.

All four minimise::

    ||Xw - Y||^2 + lambda1 ||Zw||^2 + lambda2 1'(ZZ')^{-1} Z w

over the simplex ``w >= 0, sum(w) = 1``. Baseline sets both lambdas to zero,
Ridge uses ``Z = I`` and ``lambda2 = 0``; Sector and Cluster take ``Z`` from a
sector map or from spectral clustering.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as sla

from .qp import QpProblem, solve_qp
from .spectral import ClusterModel, assignment_matrix

__all__ = [
    "METHODS",
    "TrackingError",
    "TrackerParams",
    "Portfolio",
    "build_similarity",
    "diversity_loss",
    "diversity_loss_pairwise",
    "reweighted_l1",
    "reweighted_l1_by_cluster",
    "tracking_objective",
    "assemble_qp",
    "sparsify",
    "sector_clusters",
    "TrackingGram",
    "solve_weights",
    "track",
]

METHODS = ("baseline", "ridge", "sector", "cluster")
UNKNOWN_SECTOR = "<unknown>"


class TrackingError(RuntimeError):
    """The tracking QP could not be solved."""


@dataclass(frozen=True)
class TrackerParams:
    method: str = "cluster"
    lambda1: float = 0.0
    lambda2: float = 0.0
    weight_threshold: float = 1e-6

    def __post_init__(self):
        method = str(self.method).lower()
        object.__setattr__(self, "method", method)
        if method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.weight_threshold < 0:
            raise ValueError("lambda1, lambda2 and weight_threshold must be non-negative")
        if method == "baseline" and (self.lambda1 or self.lambda2):
            raise ValueError("baseline requires lambda1 = lambda2 = 0")
        if method == "ridge" and self.lambda2:
            raise ValueError("ridge requires lambda2 = 0")


@dataclass(frozen=True)
class Portfolio:
    weights: Mapping[str, float]
    as_of: dt.date | None = None
    threshold: float = 1e-6

    @property
    def n_holdings(self) -> int:
        return sum(1 for v in self.weights.values() if v > self.threshold)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ticker", "weight"])
            for t, v in self.weights.items():
                w.writerow([t, repr(float(v))])

    def to_dict(self) -> dict:
        return {
            "as_of": self.as_of.isoformat() if self.as_of else None,
            "n_holdings": self.n_holdings,
            "threshold": self.threshold,
            "weights": {t: float(v) for t, v in self.weights.items()},
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_csv(cls, path, as_of=None, threshold=1e-6) -> "Portfolio":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls({r["ticker"]: float(r["weight"]) for r in rows}, as_of, threshold)


def _Z(Z) -> np.ndarray:
    return np.asarray(Z.Z if isinstance(Z, ClusterModel) else Z, dtype=float)


def build_similarity(Z) -> np.ndarray:
    """Asset similarity ``A = Z'Z``."""
    Z = _Z(Z)
    return Z.T @ Z


def diversity_loss(w, Z) -> float:
    """``||Zw||^2``: squared capital per cluster, summed (Herfindahl over clusters)."""
    p = _Z(Z) @ np.asarray(w, dtype=float)
    return float(p @ p)


def diversity_loss_pairwise(w, A) -> float:
    """``w'Aw`` expanded as Herfindahl plus twice the similar-pair cross terms."""
    w = np.asarray(w, dtype=float)
    A = np.asarray(A, dtype=float)
    cross = np.triu(np.outer(w, w) * A, k=1).sum()
    return float(w @ w + 2.0 * cross)


def _inverse_sizes(Z: np.ndarray) -> np.ndarray:
    sizes = Z.sum(axis=1)
    if np.any(sizes <= 0):
        raise ValueError("empty cluster in Z")
    return 1.0 / sizes


def reweighted_l1(w, Z) -> float:
    """``1'(ZZ')^{-1} Z |w|``, with ``ZZ'`` the diagonal of cluster sizes."""
    Z = _Z(Z)
    return float(_inverse_sizes(Z) @ (Z @ np.abs(np.asarray(w, dtype=float))))


def reweighted_l1_by_cluster(w, labels) -> float:
    """Same penalty summed cluster by cluster: ``sum_k |C_k|^{-1} sum_{j in C_k} |w_j|``."""
    w = np.abs(np.asarray(w, dtype=float))
    labels = np.asarray(labels)
    total = 0.0
    for k in np.unique(labels):
        members = labels == k
        total += w[members].sum() / members.sum()
    return float(total)


def tracking_objective(w, X, Y, Z=None, lambda1=0.0, lambda2=0.0) -> float:
    """Evaluate the full objective directly (``Z=None`` means identity)."""
    w = np.asarray(w, dtype=float)
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    r = X @ w - Y
    value = float(r @ r)
    if lambda1:
        value += lambda1 * (float(w @ w) if Z is None else diversity_loss(w, Z))
    if lambda2:
        value += lambda2 * (float(np.abs(w).sum()) if Z is None else reweighted_l1(w, Z))
    return value


def _simplex_constraints(n):
    return -np.eye(n), np.zeros(n), np.ones((1, n)), np.ones(1)


def assemble_qp(X, Y, Z=None, lambda1=0.0, lambda2=0.0) -> QpProblem:
    """Quadratic-program form of the tracking objective on the simplex.

    ``P = 2(X'X + lambda1 Z'Z)``, ``q = lambda2 Z'(ZZ')^{-1} 1 - 2X'Y``,
    ``G = -I``, ``h = 0``, ``A = 1'``, ``b = 1``. ``Z=None`` stands for the
    identity. The constant ``||Y||^2`` is dropped.
    """
    return TrackingGram(X, Y).problem(Z, lambda1, lambda2)


class TrackingGram:
    """Cached ``X'X`` and ``X'Y`` so many (lambda1, lambda2) pairs share one pass over the data."""

    def __init__(self, X, Y):
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if X.ndim != 2 or Y.shape != (X.shape[0],):
            raise ValueError(f"X {X.shape} and Y {Y.shape} do not agree")
        self.n = X.shape[1]
        self.XtX = X.T @ X
        self.XtY = X.T @ Y
        self.YtY = float(Y @ Y)

    def problem(self, Z=None, lambda1=0.0, lambda2=0.0) -> QpProblem:
        n = self.n
        if Z is None:
            A = np.eye(n)
            c = np.ones(n)
        else:
            Zm = _Z(Z)
            if Zm.shape[1] != n:
                raise ValueError(f"Z has {Zm.shape[1]} columns, X has {n}")
            A = Zm.T @ Zm
            c = Zm.T @ _inverse_sizes(Zm)
        P = 2.0 * (self.XtX + lambda1 * A)
        q = lambda2 * c - 2.0 * self.XtY
        return QpProblem(P, q, *_simplex_constraints(n))


def _ensure_definite(P: np.ndarray) -> np.ndarray:
    """Add a vanishing ridge when ``P`` is only semidefinite."""
    try:
        sla.cho_factor(P, check_finite=False)
        return P
    except np.linalg.LinAlgError:
        n = P.shape[0]
        eps = 1e-10 * np.trace(P) / n
        return P + eps * np.eye(n)


def sparsify(w, threshold: float) -> np.ndarray:
    """Zero entries at or below ``threshold`` and renormalise the rest to sum to one."""
    w = np.asarray(w, dtype=float)
    if threshold <= 0:
        return w.copy()
    out = np.where(w > threshold, w, 0.0)
    total = out.sum()
    if total <= 0:
        raise ValueError(f"every weight is at or below the threshold {threshold}")
    return out / total


def sector_clusters(tickers: Sequence[str], sector_of: Mapping[str, str] | None) -> ClusterModel:
    """Assignment matrix from sector labels; unlabelled assets share one extra cluster."""
    sector_of = sector_of or {}
    names = [sector_of.get(t, UNKNOWN_SECTOR) for t in tickers]
    order = sorted(set(names) - {UNKNOWN_SECTOR})
    if UNKNOWN_SECTOR in names:
        order.append(UNKNOWN_SECTOR)
    index = {s: k for k, s in enumerate(order)}
    return assignment_matrix([index[s] for s in names], len(tickers), len(order))


def solve_weights(
    gram: TrackingGram,
    Z,
    lambda1: float,
    lambda2: float,
    tol: float = 1e-8,
    max_iters: int = 100,
    context: str = "",
):
    """Solve the tracking QP and return ``(raw weights, QpSolution)``."""
    problem = gram.problem(Z, lambda1, lambda2)
    problem.P = _ensure_definite(problem.P)
    sol = solve_qp(problem, tol=tol, max_iters=max_iters)
    if not sol.optimal:
        where = f" ({context})" if context else ""
        raise TrackingError(
            f"QP {sol.status} after {sol.iterations} iterations{where}, "
            f"lambda1={lambda1}, lambda2={lambda2}"
        )
    return sol.w, sol


def _method_Z(params: TrackerParams, clusters):
    if params.method in ("baseline", "ridge"):
        return None
    if clusters is None:
        raise ValueError(f"method {params.method!r} needs a cluster model")
    return clusters


def track(
    X,
    Y=None,
    clusters: ClusterModel | None = None,
    params: TrackerParams = TrackerParams(),
    tickers: Sequence[str] | None = None,
    as_of: dt.date | None = None,
) -> Portfolio:
    """Solve one tracking problem and return the thresholded portfolio.

    ``X`` may be a ``ReturnsMatrix`` (then ``Y``, ``tickers`` and ``as_of``
    default to its fields) or a plain D x N array.
    """
    if hasattr(X, "X"):
        rm = X
        X, Y = rm.X, rm.Y if Y is None else Y
        tickers = rm.tickers if tickers is None else tickers
        as_of = rm.window[1] if as_of is None else as_of
    X = np.asarray(X, dtype=float)
    n = X.shape[1]
    tickers = [str(j) for j in range(n)] if tickers is None else list(tickers)
    Z = _method_Z(params, clusters)
    window = f"window ending {as_of}" if as_of else ""
    w, _ = solve_weights(
        TrackingGram(X, Y),
        Z,
        params.lambda1,
        params.lambda2,
        context=f"{params.method} {window}".strip(),
    )
    w = sparsify(np.maximum(w, 0.0), params.weight_threshold)
    return Portfolio(
        {t: float(v) for t, v in zip(tickers, w) if v > 0},
        as_of=as_of,
        threshold=params.weight_threshold,
    )
