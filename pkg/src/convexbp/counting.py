"""Counting numbers of convex free energies: representation, checks and fitting.

A convex free energy is parameterised by ``c_i >= 0`` per variable,
``c_a > 0`` per factor and ``c_ia >= 0`` per incidence. Only the aggregates

    cbar_a = c_a + sum_{i in a} c_ia
    cbar_i = c_i - sum_{a ni i} c_ia

enter the objective; the split matters for the message-passing updates
through ``chat_i = c_i + sum_a c_a`` and ``chat_ia = c_a + c_ia``.

Counting numbers are *admissible* when, for every variable ``i``,

    c_i + sum_{a ni i} (c_a + sum_{j in a, j != i} c_ja) = 1

together with the sign constraints. Strict positivity of ``c_a`` is enforced
as ``c_a >= EPS_POS``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from ._polytope import PolytopeProjector
from .errors import (
    DimensionMismatch,
    Disconnected,
    Infeasible,
    NotPairwise,
    ParseError,
    SolverDidNotConverge,
)
from .factor_graph import FactorGraph

logger = logging.getLogger(__name__)

EPS_POS = 1e-6


@dataclass(frozen=True)
class CountingNumbers:
    """``c_var[i]``, ``c_fac[a]`` and ``c_edge[k]`` with ``k`` indexing ``graph.edges``."""

    c_var: np.ndarray
    c_fac: np.ndarray
    c_edge: np.ndarray

    def __post_init__(self):
        for name in ("c_var", "c_fac", "c_edge"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.c_var, self.c_fac, self.c_edge])

    @classmethod
    def from_vector(cls, graph: FactorGraph, x) -> "CountingNumbers":
        n, m = graph.num_variables, graph.num_factors
        x = np.asarray(x, dtype=float)
        return cls(x[:n], x[n:n + m], x[n + m:])

    def edge(self, graph: FactorGraph, i: int, a: int) -> float:
        return float(self.c_edge[graph.edge_id(i, a)])

    def matches(self, graph: FactorGraph) -> bool:
        return (self.c_var.size == graph.num_variables and self.c_fac.size == graph.num_factors
                and self.c_edge.size == len(graph.edges))


@dataclass(frozen=True)
class DerivedConstants:
    cbar_fac: np.ndarray
    cbar_var: np.ndarray
    chat_var: np.ndarray
    chat_edge: np.ndarray


@dataclass(frozen=True)
class AdmissibilityReport:
    residuals: np.ndarray
    sign_violations: list
    tol: float

    @property
    def max_residual(self) -> float:
        return float(np.abs(self.residuals).max(initial=0.0))

    @property
    def admissible(self) -> bool:
        return self.max_residual <= self.tol and not self.sign_violations

    def __bool__(self):
        return self.admissible


# ---------------------------------------------------------------------------
# linear maps on the stacked vector x = [c_var, c_fac, c_edge]

def _layout(graph: FactorGraph):
    n, m, e = graph.num_variables, graph.num_factors, len(graph.edges)
    return n, m, e, n + m + e


def admissibility_matrix(graph: FactorGraph) -> sp.csr_matrix:
    """Rows are variables; ``A @ x == 1`` are the admissibility equalities."""
    n, m, _, dim = _layout(graph)
    rows, cols = [], []
    for i in range(n):
        rows.append(i)
        cols.append(i)
        for a in graph.neighbors(i):
            rows.append(i)
            cols.append(n + a)
            for j in graph.scope(a):
                if j != i:
                    rows.append(i)
                    cols.append(n + m + graph.edge_id(j, a))
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, dim))


def cbar_matrix(graph: FactorGraph) -> sp.csr_matrix:
    """Rows are factors; ``B @ x`` gives ``cbar_a``."""
    n, m, _, dim = _layout(graph)
    rows, cols = [], []
    for a in range(m):
        rows.append(a)
        cols.append(n + a)
        for i in graph.scope(a):
            rows.append(a)
            cols.append(n + m + graph.edge_id(i, a))
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, dim))


def _lower_bounds(graph: FactorGraph, eps: float) -> np.ndarray:
    n, m, e, dim = _layout(graph)
    lb = np.zeros(dim)
    lb[n:n + m] = eps
    return lb


# ---------------------------------------------------------------------------

def derive_constants(graph: FactorGraph, counting: CountingNumbers) -> DerivedConstants:
    if not counting.matches(graph):
        raise DimensionMismatch("counting numbers do not match the graph adjacency")
    n, m = graph.num_variables, graph.num_factors
    cbar_fac = counting.c_fac.copy()
    cbar_var = counting.c_var.copy()
    chat_var = counting.c_var.copy()
    chat_edge = np.empty(len(graph.edges))
    for k, (i, a) in enumerate(graph.edges):
        cia = counting.c_edge[k]
        cbar_fac[a] += cia
        cbar_var[i] -= cia
        chat_var[i] += counting.c_fac[a]
        chat_edge[k] = counting.c_fac[a] + cia
    return DerivedConstants(cbar_fac, cbar_var, chat_var, chat_edge)


def check_admissible(graph: FactorGraph, counting: CountingNumbers,
                     tol: float = 1e-8, eps: float = 0.0) -> AdmissibilityReport:
    """Per-variable residuals of the admissibility equalities plus sign violations.

    ``eps`` is the lower bound demanded of ``c_a``; the default ``0`` tests the
    strict inequality ``c_a > 0``.
    """
    if not counting.matches(graph):
        raise DimensionMismatch("counting numbers do not match the graph adjacency")
    x = counting.vector()
    residuals = admissibility_matrix(graph) @ x - 1.0
    violations = []
    for i, c in enumerate(counting.c_var):
        if c < 0:
            violations.append(("c_var", i, float(c)))
    for a, c in enumerate(counting.c_fac):
        if c <= 0 or c < eps:
            violations.append(("c_fac", a, float(c)))
    for k, c in enumerate(counting.c_edge):
        if c < 0:
            violations.append(("c_edge", graph.edges[k], float(c)))
    return AdmissibilityReport(residuals, violations, tol)


def bethe_counting(graph: FactorGraph):
    """Bethe targets ``(cbar_fac, cbar_var)``: ones for factors, ``1 - d_i`` for variables."""
    cbar_fac = np.ones(graph.num_factors)
    cbar_var = np.array([1.0 - graph.degree(i) for i in range(graph.num_variables)])
    return cbar_fac, cbar_var


# ---------------------------------------------------------------------------
# spanning trees

def _variable_edges(graph: FactorGraph):
    pairs = {}
    for f in graph.factors:
        if len(f.scope) > 2:
            raise NotPairwise(f"factor {f.id} has scope of size {len(f.scope)}")
        if len(f.scope) == 2:
            pairs[f.id] = tuple(f.scope)
    return pairs


def _laplacian(n, edges):
    L = np.zeros((n, n))
    for u, v in edges:
        L[u, u] += 1
        L[v, v] += 1
        L[u, v] -= 1
        L[v, u] -= 1
    return L


def _is_connected(n, edges) -> bool:
    parent = list(range(n))

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    for u, v in edges:
        parent[find(u)] = find(v)
    return len({find(u) for u in range(n)}) == 1


def bareiss_det(matrix) -> int:
    """Exact determinant of an integer matrix (fraction-free elimination)."""
    M = [[int(x) for x in row] for row in matrix]
    n = len(M)
    if n == 0:
        return 1
    sign, prev = 1, 1
    for k in range(n - 1):
        if M[k][k] == 0:
            for r in range(k + 1, n):
                if M[r][k] != 0:
                    M[k], M[r] = M[r], M[k]
                    sign = -sign
                    break
            else:
                return 0
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                M[i][j] = (M[i][j] * M[k][k] - M[i][k] * M[k][j]) // prev
        prev = M[k][k]
    return sign * M[n - 1][n - 1]


def spanning_tree_count(n: int, edges) -> int:
    """Number of spanning trees of a multigraph (matrix-tree theorem, exact)."""
    if n <= 1:
        return 1
    L = _laplacian(n, edges).astype(int)
    return bareiss_det(L[1:, 1:])


def _contract(n, edges, e):
    u, v = e
    relabel = {}
    k = 0
    for w in range(n):
        if w == v:
            continue
        relabel[w] = k
        k += 1
    relabel[v] = relabel[u]
    out = []
    skipped = False
    for a, b in edges:
        if not skipped and {a, b} == {u, v}:
            skipped = True
            continue
        a, b = relabel[a], relabel[b]
        if a != b:
            out.append((a, b))
    return n - 1, out


def _components(n, edges):
    parent = list(range(n))

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    for u, v in edges:
        parent[find(u)] = find(v)
    groups = {}
    for u in range(n):
        groups.setdefault(find(u), []).append(u)
    return list(groups.values())


def edge_appearance_probabilities(n: int, edges, exact: bool = False, forest: bool = False):
    """Probability that each edge lies in a uniformly random spanning tree.

    The float path evaluates effective resistances from the inverse of the
    grounded Laplacian. ``exact=True`` returns :class:`fractions.Fraction`
    values from spanning-tree counts of the edge contractions. With
    ``forest=True`` a disconnected graph is handled one component at a time
    (uniform spanning forest) instead of raising :class:`Disconnected`.
    """
    edges = [tuple(e) for e in edges]
    if not _is_connected(n, edges):
        if not forest:
            raise Disconnected("variable graph is not connected")
        out = [None] * len(edges)
        for comp in _components(n, edges):
            index = {u: k for k, u in enumerate(comp)}
            ids = [k for k, (u, _) in enumerate(edges) if u in index]
            sub = [(index[edges[k][0]], index[edges[k][1]]) for k in ids]
            for k, p in zip(ids, edge_appearance_probabilities(len(comp), sub, exact)):
                out[k] = p
        return out
    if exact:
        total = spanning_tree_count(n, edges)
        return [Fraction(spanning_tree_count(*_contract(n, edges, e)), total) for e in edges]
    if n == 1:
        return []
    L = _laplacian(n, edges)
    M = np.zeros((n, n))
    M[1:, 1:] = np.linalg.inv(L[1:, 1:])
    return [M[u, u] + M[v, v] - 2.0 * M[u, v] for u, v in edges]


def trw_pairwise_counting(graph: FactorGraph, exact: bool = False,
                          forest: bool = False) -> np.ndarray:
    """Target ``cbar_a`` per factor: edge appearance probability, 1 for singletons."""
    pairs = _variable_edges(graph)
    ids = sorted(pairs)
    probs = edge_appearance_probabilities(graph.num_variables, [pairs[a] for a in ids], exact,
                                          forest)
    cbar = np.ones(graph.num_factors, dtype=object if exact else float)
    if exact:
        cbar[:] = Fraction(1)
    for a, p in zip(ids, probs):
        cbar[a] = p
    return cbar


# ---------------------------------------------------------------------------
# fitting

def _initial_point(graph: FactorGraph) -> np.ndarray:
    n, m, _, dim = _layout(graph)
    x = np.zeros(dim)
    dmax = max(graph.degree(i) for i in range(n))
    x[n:n + m] = 1.0 / dmax
    return x


def _phase1(Aeq, beq, lb):
    """LP minimising the artificial slack on ``Aeq x = beq``; ``None`` if infeasible."""
    k, dim = Aeq.shape
    I = sp.identity(k, format="csr")
    A1 = sp.hstack([Aeq, I, -I]).tocsr()
    cost = np.concatenate([np.zeros(dim), np.ones(2 * k)])
    bounds = [(l, None) for l in lb] + [(0, None)] * (2 * k)
    res = linprog(cost, A_eq=A1, b_eq=beq, bounds=bounds, method="highs")
    if res.status != 0 or res.fun > 1e-9:
        return None
    return res


def solve_admissible(graph: FactorGraph, target_cbar, eps: float = EPS_POS) -> CountingNumbers:
    """Admissible counting numbers whose ``cbar_a`` equal ``target_cbar``.

    Feasibility is settled by a phase-1 linear program; the returned point is
    the Euclidean projection of an even split of each target onto the
    feasible polyhedron, so it is deterministic and avoids vertices.
    """
    target = np.asarray(target_cbar, dtype=float)
    n, m, _, dim = _layout(graph)
    if target.shape != (m,):
        raise DimensionMismatch(f"expected {m} targets, got {target.shape}")
    if np.any(target <= 0):
        raise ValueError("targets must be positive")
    A = admissibility_matrix(graph)
    B = cbar_matrix(graph)
    Aeq = sp.vstack([A, B]).tocsr()
    beq = np.concatenate([np.ones(n), target])
    lb = _lower_bounds(graph, eps)

    res = _phase1(Aeq, beq, lb)
    if res is None:
        raise Infeasible("no admissible counting numbers reach the targets")

    # phase 2: the split of each cbar_a is not unique; prefer the one that keeps
    # every c_a as far from zero as possible (best-conditioned updates)
    tau = _max_min_factor_count(Aeq, beq, lb, n, m, dim)
    floor = lb.copy()
    floor[n:n + m] = max(eps, 0.5 * tau)

    y = np.zeros(dim)
    cbar_var = 1.0 - np.array([target[list(graph.neighbors(i))].sum() for i in range(n)])
    for a, f in enumerate(graph.factors):
        share = target[a] / (len(f.scope) + 1)
        y[n + a] = share
        for i in f.scope:
            y[n + m + graph.edge_id(i, a)] = share
    for i in range(n):
        y[i] = cbar_var[i] + sum(y[n + m + graph.edge_id(i, a)] for a in graph.neighbors(i))
    try:
        x = PolytopeProjector(Aeq, beq, floor).project(y, tol=1e-13)
    except SolverDidNotConverge:
        # fall back on the certified LP point
        x = np.maximum(res.x[:dim], lb)
    counting = CountingNumbers.from_vector(graph, x)
    if np.abs(B @ x - target).max() > 1e-8 or not check_admissible(graph, counting, 1e-8, eps):
        raise Infeasible("could not polish the phase-1 solution to tolerance")
    return counting


def _max_min_factor_count(Aeq, beq, lb, n, m, dim) -> float:
    """Largest ``t`` such that some feasible point has every ``c_a >= t``."""
    k = Aeq.shape[0]
    # variables [x, t]; maximise t subject to c_a - t >= 0
    A_eq = sp.hstack([Aeq, sp.csr_matrix((k, 1))]).tocsr()
    sel = sp.csr_matrix((np.ones(m), (np.arange(m), n + np.arange(m))), shape=(m, dim))
    A_ub = sp.hstack([-sel, sp.csr_matrix(np.ones((m, 1)))]).tocsr()
    cost = np.zeros(dim + 1)
    cost[-1] = -1.0
    bounds = [(l, None) for l in lb] + [(None, None)]
    res = linprog(cost, A_ub=A_ub, b_ub=np.zeros(m), A_eq=A_eq, b_eq=beq,
                  bounds=bounds, method="highs")
    if res.status != 0:
        return float(lb[n:n + m].min(initial=0.0))
    return float(res.x[-1])


STALL_WINDOW = 200


@dataclass
class FitResult:
    counting: CountingNumbers
    objective: float
    iterations: int
    trace: list


def _l2(B):
    def value(x):
        r = B @ x - 1.0
        return float(r @ r)

    def grad(x):
        return 2.0 * (B.T @ (B @ x - 1.0))

    return value, grad


def _entropy(B):
    def value(x):
        c = B @ x
        return float(np.sum(c * np.log(c)))

    def grad(x):
        return B.T @ (np.log(B @ x) + 1.0)

    return value, grad


def _projected_gradient(value, grad, project, x0, tol, max_iter):
    x = project(x0)
    fx = value(x)
    g = grad(x)
    trace = [fx]
    step = 1.0
    x_prev = g_prev = None
    best, since = fx, 0
    for it in range(1, max_iter + 1):
        mapping = x - project(x - g)
        if np.abs(mapping).max() <= tol:
            return x, fx, it - 1, trace
        # the minimiser is not unique in x, only in cbar; stop once the
        # objective has stopped improving
        if since >= STALL_WINDOW:
            return x, fx, it - 1, trace
        if x_prev is not None:
            s, yv = x - x_prev, g - g_prev
            sy = float(s @ yv)
            if sy > 0:
                step = min(max(float(s @ s) / sy, 1e-10), 1e10)
        t = step
        while True:
            x_new = project(x - t * g)
            f_new = value(x_new)
            if f_new <= fx + 1e-4 * float(g @ (x_new - x)) or t < 1e-14:
                break
            t *= 0.5
        if f_new > fx:
            # no further descent is representable; accept the current point
            return x, fx, it, trace
        x_prev, g_prev = x, g
        x, fx = x_new, f_new
        g = grad(x)
        trace.append(fx)
        if fx < best - 1e-15 * (1.0 + abs(best)):
            best, since = fx, 0
        else:
            since += 1
    raise SolverDidNotConverge(f"counting-number fit did not converge in {max_iter} iterations")


def _fit(graph, which, eps, tol, max_iter):
    A = admissibility_matrix(graph)
    B = cbar_matrix(graph)
    lb = _lower_bounds(graph, eps)
    if _phase1(A, np.ones(graph.num_variables), lb) is None:
        raise Infeasible(f"no admissible counting numbers have every c_a >= {eps}")
    if which == "l2":
        # zero loss is the global minimum, reached whenever cbar = 1 is admissible
        try:
            return FitResult(solve_admissible(graph, np.ones(graph.num_factors), eps), 0.0, 0, [0.0])
        except (Infeasible, SolverDidNotConverge):
            pass
    projector = PolytopeProjector(A, np.ones(graph.num_variables), lb)
    value, grad = _l2(B) if which == "l2" else _entropy(B)

    def project(y):
        return projector.project(y, tol=1e-13)

    x, fx, iters, trace = _projected_gradient(value, grad, project, _initial_point(graph),
                                              tol, max_iter)
    logger.debug("%s fit: objective %.3e after %d iterations", which, fx, iters)
    counting = CountingNumbers.from_vector(graph, x)
    # the objective only sees cbar; re-split it in the best-conditioned way
    try:
        counting = solve_admissible(graph, B @ x, eps)
    except (Infeasible, SolverDidNotConverge):
        logger.debug("keeping the gradient-method split")
    return FitResult(counting, fx, iters, trace)


def fit_convex_l2(graph: FactorGraph, eps: float = EPS_POS, tol: float = 1e-10,
                  max_iter: int = 1_000_000, full: bool = False):
    """Admissible counting numbers with ``cbar_a`` as close to 1 as possible (least squares).

    Returns :class:`CountingNumbers`, or the :class:`FitResult` with the
    objective trace when ``full`` is set.
    """
    res = _fit(graph, "l2", eps, tol, max_iter)
    return res if full else res.counting


def fit_convex_maxent(graph: FactorGraph, eps: float = EPS_POS, tol: float = 1e-10,
                      max_iter: int = 1_000_000, full: bool = False):
    """Admissible counting numbers minimising ``sum_a cbar_a ln cbar_a``."""
    res = _fit(graph, "maxent", eps, tol, max_iter)
    return res if full else res.counting


def fit_trw(graph: FactorGraph, eps: float = EPS_POS) -> CountingNumbers:
    """TRW counting numbers; disconnected graphs use uniform spanning forests."""
    return solve_admissible(graph, trw_pairwise_counting(graph, forest=True), eps)


def fit_bethe(graph: FactorGraph, eps: float = EPS_POS) -> CountingNumbers:
    cbar_fac, _ = bethe_counting(graph)
    return solve_admissible(graph, cbar_fac, eps)


FITTERS = {
    "l2": fit_convex_l2,
    "maxent": fit_convex_maxent,
    "trw": fit_trw,
    "bethe": fit_bethe,
}


def fit(graph: FactorGraph, method: str) -> CountingNumbers:
    try:
        fitter = FITTERS[method]
    except KeyError:
        raise ValueError(f"unknown counting method {method!r}") from None
    return fitter(graph)


# ---------------------------------------------------------------------------
# sidecar file

def serialize_counts(graph: FactorGraph, counting: CountingNumbers) -> str:
    lines = ["COUNTS",
             " ".join(repr(float(c)) for c in counting.c_var),
             " ".join(repr(float(c)) for c in counting.c_fac)]
    for k, (i, a) in enumerate(graph.edges):
        lines.append(f"{i} {a} {float(counting.c_edge[k])!r}")
    return "\n".join(lines) + "\n"


def parse_counts(text: str, graph: FactorGraph) -> CountingNumbers:
    toks = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        toks.extend((t, lineno) for t in line.split())
    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(toks):
            raise ParseError(f"unexpected end of file while reading {what}",
                             toks[-1][1] if toks else None)
        tok = toks[pos]
        pos += 1
        return tok

    def num(what, kind=float):
        tok, line = take(what)
        try:
            return kind(tok)
        except ValueError:
            raise ParseError(f"bad value {tok!r} for {what}", line) from None

    head, line = take("header")
    if head != "COUNTS":
        raise ParseError(f"expected header 'COUNTS', got {head!r}", line)
    c_var = [num("c_i") for _ in range(graph.num_variables)]
    c_fac = [num("c_a") for _ in range(graph.num_factors)]
    c_edge = np.full(len(graph.edges), np.nan)
    while pos < len(toks):
        line = toks[pos][1]
        i, a = num("incidence variable", int), num("incidence factor", int)
        c = num("c_ia")
        if (i, a) not in graph._edge_index:
            raise ParseError(f"({i}, {a}) is not an incidence of the graph", line)
        c_edge[graph.edge_id(i, a)] = c
    if np.isnan(c_edge).any():
        missing = graph.edges[int(np.flatnonzero(np.isnan(c_edge))[0])]
        raise ParseError(f"no value for incidence {missing}")
    return CountingNumbers(c_var, c_fac, c_edge)


def read_counts(path, graph: FactorGraph) -> CountingNumbers:
    with open(path, encoding="utf-8") as fh:
        return parse_counts(fh.read(), graph)


def write_counts(path, graph: FactorGraph, counting: CountingNumbers) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_counts(graph, counting))
