"""Primal-dual interior-point solver for convex quadratic programs.

Solves::

    minimize    1/2 x'Px + q'x
    subject to  Gx <= h
                Ax  = b

with Mehrotra predictor-corrector steps on the slack formulation
``Gx + s = h, s >= 0``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

__all__ = [
    "QpProblem",
    "QpSolution",
    "QpError",
    "KktResiduals",
    "solve_qp",
    "kkt_residuals",
    "simplex_problem",
]

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

_STEP_FRACTION = 0.99
_DIVERGENCE = 1e12


class QpError(ValueError):
    """Raised for malformed QP data."""


def _as_matrix(a, n_cols: int) -> np.ndarray:
    if a is None:
        return np.zeros((0, n_cols))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros((0, n_cols))
    return a


def _as_vector(v) -> np.ndarray:
    if v is None:
        return np.zeros(0)
    return np.atleast_1d(np.asarray(v, dtype=float)).ravel()


@dataclass
class QpProblem:
    """Data of ``min 1/2 x'Px + q'x  s.t.  Gx <= h, A_eq x = b_eq``."""

    P: np.ndarray
    q: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = _as_vector(self.q)
        n = self.q.shape[0]
        self.G = _as_matrix(self.G, n)
        self.h = _as_vector(self.h)
        self.A_eq = _as_matrix(self.A_eq, n)
        self.b_eq = _as_vector(self.b_eq)
        if self.P.shape != (n, n):
            raise QpError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.G.shape != (self.h.shape[0], n):
            raise QpError(f"G has shape {self.G.shape}, h has length {self.h.shape[0]}")
        if self.A_eq.shape != (self.b_eq.shape[0], n):
            raise QpError(
                f"A_eq has shape {self.A_eq.shape}, b_eq has length {self.b_eq.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.q @ x)

    def gradient(self, x) -> np.ndarray:
        return self.P @ np.asarray(x, dtype=float) + self.q

    def validate(self) -> None:
        """Check symmetry, positive semidefiniteness and equality row rank."""
        scale = max(1.0, float(np.abs(self.P).max(initial=0.0)))
        if np.abs(self.P - self.P.T).max(initial=0.0) > 1e-10 * scale:
            raise QpError("P is not symmetric")
        norm = np.linalg.norm(self.P, 2) if self.n else 0.0
        if self.n and np.linalg.eigvalsh(self.P).min() < -1e-8 * max(norm, 1e-300):
            raise QpError("P is not positive semidefinite")
        if self.A_eq.shape[0] and np.linalg.matrix_rank(self.A_eq) < self.A_eq.shape[0]:
            raise QpError("A_eq does not have full row rank")


@dataclass
class QpSolution:
    w: np.ndarray
    objective: float
    duality_gap: float
    iterations: int
    status: str
    z: np.ndarray = field(repr=False, default=None)  # inequality multipliers
    y: np.ndarray = field(repr=False, default=None)  # equality multipliers

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal_ineq: float
    primal_eq: float
    comp_slack: float

    def max(self) -> float:
        return max(self.stationarity, self.primal_ineq, self.primal_eq, self.comp_slack)


def kkt_residuals(problem: QpProblem, w, lam=None, nu=None) -> KktResiduals:
    """Infinity-norm KKT residuals of a candidate primal-dual point.

    ``lam`` are the multipliers of ``Gw <= h`` and ``nu`` those of
    ``A_eq w = b_eq``; missing multipliers are taken as zero.
    """
    w = np.asarray(w, dtype=float)
    m, p = problem.G.shape[0], problem.A_eq.shape[0]
    lam = np.zeros(m) if lam is None else np.asarray(lam, dtype=float)
    nu = np.zeros(p) if nu is None else np.asarray(nu, dtype=float)
    grad = problem.P @ w + problem.q + problem.G.T @ lam + problem.A_eq.T @ nu
    slack = problem.h - problem.G @ w
    eq = problem.A_eq @ w - problem.b_eq
    return KktResiduals(
        stationarity=float(np.abs(grad).max(initial=0.0)),
        primal_ineq=float(np.maximum(-slack, 0.0).max(initial=0.0)),
        primal_eq=float(np.abs(eq).max(initial=0.0)),
        comp_slack=float(np.abs(lam * slack).sum()),
    )


def simplex_problem(P, q) -> QpProblem:
    """QP over the probability simplex ``x >= 0, sum(x) = 1``."""
    n = len(q)
    return QpProblem(P, q, -np.eye(n), np.zeros(n), np.ones((1, n)), np.ones(1))


class _KktSolver:
    """Factorises ``[[P + G'DG, A'], [A, 0]]`` for one interior-point iterate."""

    def __init__(self, P, G, A, d):
        self.A = A
        H = P + (G.T * d) @ G
        self.H = H
        self.chol = None
        try:
            self.chol = sla.cho_factor(H, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            pass
        if self.chol is not None and A.shape[0]:
            HiAt = sla.cho_solve(self.chol, A.T, check_finite=False)
            S = A @ HiAt
            try:
                self.schur = sla.cho_factor(S, lower=True, check_finite=False)
                self.HiAt = HiAt
            except np.linalg.LinAlgError:
                self.chol = None
        if self.chol is None:
            n, p = H.shape[0], A.shape[0]
            K = np.zeros((n + p, n + p))
            K[:n, :n] = H
            K[n:, :n] = A
            K[:n, n:] = A.T
            self.kkt = K

    def solve(self, r1, r2):
        n, p = r1.shape[0], r2.shape[0]
        if self.chol is not None:
            Hir1 = sla.cho_solve(self.chol, r1, check_finite=False)
            if not p:
                return Hir1, np.zeros(0)
            dy = sla.cho_solve(self.schur, self.A @ Hir1 - r2, check_finite=False)
            return Hir1 - self.HiAt @ dy, dy
        # symmetric indefinite (Bunch-Kaufman) fallback
        sol = sla.solve(self.kkt, np.concatenate([r1, r2]), assume_a="sym")
        return sol[:n], sol[n:]


def _max_step(v, dv) -> float:
    neg = dv < 0
    if not neg.any():
        return np.inf
    return float((-v[neg] / dv[neg]).min())


def _polish(problem: QpProblem, x, y, z, s):
    """Re-solve the equality-constrained QP on the identified active set.

    Returns ``(x, y, z)`` or None when the candidate is not primal and dual
    feasible.
    """
    P, q, G, h, A, b = problem.P, problem.q, problem.G, problem.h, problem.A_eq, problem.b_eq
    n, p = problem.n, A.shape[0]
    active = np.flatnonzero(s < z)
    E = np.vstack([A, G[active]])
    k = E.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P
    K[:n, n:] = E.T
    K[n:, :n] = E
    rhs = np.concatenate([-q, b, h[active]])
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            sol = sla.solve(K, rhs, assume_a="sym")
    except (np.linalg.LinAlgError, sla.LinAlgWarning):
        return None
    if not np.all(np.isfinite(sol)):
        return None
    xp = sol[:n]
    yp = sol[n:n + p]
    zp = np.zeros_like(z)
    zp[active] = sol[n + p:]
    if zp.min(initial=0.0) < 0 or (G @ xp - h).max(initial=-np.inf) > 0:
        # clip roundoff-level violations, reject real ones
        viol = max(-zp.min(initial=0.0), (G @ xp - h).max(initial=0.0))
        if viol > 1e-12 * (1.0 + np.abs(sol).max()):
            return None
        zp = np.maximum(zp, 0.0)
    return xp, yp, zp


def solve_qp(
    problem: QpProblem,
    tol: float = 1e-8,
    max_iters: int = 100,
    x0=None,
    polish: bool = True,
) -> QpSolution:
    """Solve a convex QP with a Mehrotra predictor-corrector interior-point method.

    Parameters
    ----------
    problem : QpProblem
        Problem data; ``P`` must be positive semidefinite.
    tol : float
        Relative tolerance on the stationarity, primal feasibility and
        complementarity residuals.
    max_iters : int
        Iteration cap. On exhaustion the best iterate is returned with
        ``status == "max_iter"``.
    x0 : array_like, optional
        Starting primal point. Defaults to the least-norm solution of the
        equality constraints (the uniform vector for the simplex).
    polish : bool
        After convergence, re-solve exactly on the identified active set and
        keep the result when it is feasible and no worse than the iterate.

    Returns
    -------
    QpSolution
    """
    P, q, G, h, A, b = problem.P, problem.q, problem.G, problem.h, problem.A_eq, problem.b_eq
    n, m, p = problem.n, G.shape[0], A.shape[0]

    if x0 is not None:
        x = np.array(x0, dtype=float)
    elif p:
        x = np.linalg.lstsq(A, b, rcond=None)[0]
    else:
        x = np.zeros(n)
    y = np.zeros(p)
    s = np.ones(m)
    z = np.ones(m)

    scale_d = 1.0 + max(np.abs(P).max(initial=0.0), np.abs(q).max(initial=0.0))
    scale_p = 1.0 + max(np.abs(h).max(initial=0.0), np.abs(b).max(initial=0.0))

    if m == 0:
        solver = _KktSolver(P, G, A, np.zeros(0))
        x, y = solver.solve(-q, b)
        obj = problem.objective(x)
        res = kkt_residuals(problem, x, None, y)
        status = OPTIMAL if max(res.stationarity / scale_d, res.primal_eq / scale_p) <= tol else MAX_ITER
        return QpSolution(x, obj, 0.0, 1, status, np.zeros(0), y)

    best = None
    status = MAX_ITER
    it = 0
    for it in range(max_iters + 1):
        rd = P @ x + q + A.T @ y + G.T @ z
        rp = A @ x - b
        ri = G @ x + s - h
        gap = float(s @ z)
        obj = problem.objective(x)
        err_d = np.abs(rd).max(initial=0.0) / scale_d
        err_p = max(np.abs(rp).max(initial=0.0), np.abs(ri).max(initial=0.0)) / scale_p
        err_g = gap / (1.0 + abs(obj))
        merit = max(err_d, err_p, err_g)
        if best is None or merit < best[0]:
            best = (merit, x.copy(), y.copy(), z.copy(), gap, obj, it)
        if merit <= tol:
            status = OPTIMAL
            break
        if (
            not np.all(np.isfinite(x))
            or np.abs(x).max(initial=0.0) > _DIVERGENCE
            or np.abs(z).max(initial=0.0) > _DIVERGENCE
        ):
            status = INFEASIBLE
            break
        if it == max_iters:
            break

        mu = gap / m
        d = z / s
        try:
            kkt = _KktSolver(P, G, A, d)
        except (np.linalg.LinAlgError, ValueError):
            status = INFEASIBLE
            break

        def direction(rc):
            r1 = -rd - G.T @ (d * ri) + G.T @ (rc / s)
            dx, dy = kkt.solve(r1, -rp)
            dz = d * (G @ dx + ri) - rc / s
            ds = -ri - G @ dx
            return dx, dy, dz, ds

        # predictor
        dx, dy, dz, ds = direction(s * z)
        alpha = min(1.0, _max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + alpha * ds) @ (z + alpha * dz)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # corrector
        dx, dy, dz, ds = direction(s * z + ds * dz - sigma * mu)
        alpha = min(1.0, _STEP_FRACTION * min(_max_step(s, ds), _max_step(z, dz)))
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds

    if status != OPTIMAL:
        _, x, y, z, gap, obj, _ = best
    elif polish:
        polished = _polish(problem, x, y, z, s)
        if polished is not None:
            xp, yp, zp = polished
            res = kkt_residuals(problem, xp, zp, yp)
            before = kkt_residuals(problem, x, z, y)
            if res.max() <= before.max():
                x, y, z = xp, yp, zp
                obj = problem.objective(x)
                gap = res.comp_slack
    return QpSolution(x, obj, max(gap, 0.0), it, status, z, y)
