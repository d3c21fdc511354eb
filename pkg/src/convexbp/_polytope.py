"""Euclidean projection onto polyhedra ``{x : A x = b, x >= lb}``.

The projection is computed through its concave dual in the equality
multipliers ``nu``::

    x(nu) = max(lb, y + A^T nu),    grad = b - A x(nu)

maximised by a semismooth Newton method with Armijo backtracking. At
interior points the first Newton step is the plain affine projection, so the
common case costs one sparse solve.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import Infeasible, SolverDidNotConverge


# below this many matrix entries dense algebra beats sparse bookkeeping
DENSE_LIMIT = 250_000


class PolytopeProjector:
    def __init__(self, A, b, lb, ridge: float = 1e-12):
        A = sp.csr_matrix(A, dtype=float)
        self.dense = A.shape[0] * A.shape[1] <= DENSE_LIMIT
        self.A = A.toarray() if self.dense else A
        self.At = self.A.T.copy() if self.dense else A.T.tocsr()
        self.b = np.asarray(b, dtype=float)
        self.lb = np.broadcast_to(np.asarray(lb, dtype=float), (self.A.shape[1],)).copy()
        self.ridge = ridge
        self._nu = np.zeros(self.A.shape[0])
        self._full_factor = None

    def _solve(self, free: np.ndarray, rhs: np.ndarray, reg: float) -> np.ndarray:
        if self.dense:
            return self._solve_dense(free, rhs, reg)
        if free.all() and reg <= self.ridge:
            if self._full_factor is None:
                K = (self.A @ self.At).tocsc()
                K = K + self.ridge * sp.identity(K.shape[0], format="csc")
                self._full_factor = spla.splu(K)
            return self._full_factor.solve(rhs)
        Af = self.A[:, free]
        K = (Af @ Af.T).tocsc() + reg * sp.identity(self.A.shape[0], format="csc")
        return spla.splu(K).solve(rhs)

    def _solve_dense(self, free, rhs, reg):
        k = self.A.shape[0]
        if free.all() and reg <= self.ridge:
            if self._full_factor is None:
                self._full_factor = la.lu_factor(self.A @ self.At + self.ridge * np.eye(k))
            return la.lu_solve(self._full_factor, rhs)
        Af = self.A[:, free]
        return la.solve(Af @ Af.T + reg * np.eye(k), rhs, assume_a="sym")

    def _dual(self, y, nu):
        z = y + self.At @ nu
        x = np.maximum(self.lb, z)
        r = self.b - self.A @ x
        g = 0.5 * np.dot(x - y, x - y) - np.dot(nu, -r)
        return x, z, r, g

    def _line_search(self, y, nu, r, g, free, reg):
        d = self._solve(free, r, reg)
        slope = np.dot(d, r)
        # near the solution the ascent is below the rounding of g; fall back
        # on the residual norm as merit
        tiny = slope <= 1e-12 * (1.0 + abs(g))
        rnorm = np.linalg.norm(r)
        t = 1.0
        while True:
            nu_t = nu + t * d
            x_t, z_t, r_t, g_t = self._dual(y, nu_t)
            if g_t >= g + 1e-4 * t * slope:
                return t, nu_t, x_t, z_t, r_t, g_t, True
            if tiny and np.linalg.norm(r_t) <= (1.0 - 1e-4 * t) * rnorm:
                return t, nu_t, x_t, z_t, r_t, g_t, True
            if t < 1e-12:
                return t, nu_t, x_t, z_t, r_t, g_t, False
            t *= 0.5

    def project(self, y, tol: float = 1e-12, max_iter: int = 200, warm: bool = True):
        """Return the projection of ``y`` (equality residual ``<= tol`` in max norm)."""
        y = np.asarray(y, dtype=float)
        nu = self._nu.copy() if warm else np.zeros_like(self._nu)
        x, z, r, g = self._dual(y, nu)
        scale = 1.0 + np.abs(self.b).max(initial=0.0)
        for _ in range(max_iter):
            if np.abs(r).max(initial=0.0) <= tol * scale:
                self._nu = nu
                return x
            free = z > self.lb
            # rows without free columns are flat in the dual; the residual-scaled
            # regularisation keeps the step finite there
            rescue = max(self.ridge, min(1.0, float(np.abs(r).max())))
            reg = self.ridge
            if not np.asarray((self.A[:, free] != 0).sum(axis=1)).ravel().all():
                reg = rescue
            while True:
                t, nu_t, x_t, z_t, r_t, g_t, ok = self._line_search(y, nu, r, g, free, reg)
                # redundant rows make the ridge system nearly singular; retry
                # with a Levenberg-Marquardt shift before giving up
                if ok or reg >= rescue:
                    break
                reg = rescue
            if not ok:
                break
            nu, x, z, r, g = nu_t, x_t, z_t, r_t, g_t
            if not np.isfinite(g) or np.abs(nu).max() > 1e12:
                raise Infeasible("polyhedron appears empty (dual diverges)")
        if np.abs(r).max(initial=0.0) <= 1e3 * tol * scale:
            self._nu = nu
            return x
        raise SolverDidNotConverge(
            f"projection stalled with equality residual {np.abs(r).max():.3e}")
