"""Independent reference solvers used only by the test-suite."""
import itertools

import numpy as np


def active_set_qp(P, q, G, h, A, b, feas_tol=1e-10):
    """Brute-force QP: try every active set, keep the best feasible stationary point.

    Valid for strictly convex ``P``; each candidate solves the equality-constrained
    subproblem exactly through its KKT system.
    """
    n, m = len(q), len(h)
    best_x, best_f = None, np.inf
    for r in range(m + 1):
        for act in itertools.combinations(range(m), r):
            E = np.vstack([A, G[list(act)]]) if act else A
            f = np.concatenate([b, h[list(act)]]) if act else b
            k = E.shape[0]
            if k > n:
                continue
            K = np.zeros((n + k, n + k))
            K[:n, :n] = P
            K[:n, n:] = E.T
            K[n:, :n] = E
            rhs = np.concatenate([-q, f])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            if np.abs(K @ sol - rhs).max() > 1e-9:
                continue
            if (G @ x - h).max(initial=-np.inf) > feas_tol or np.abs(A @ x - b).max() > feas_tol:
                continue
            fx = 0.5 * x @ P @ x + q @ x
            if fx < best_f:
                best_x, best_f = x, fx
    return best_x, best_f
