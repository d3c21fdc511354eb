"""Exact and certified reference answers.

* :func:`brute_force_marginals` enumerates the joint distribution.
* :func:`elimination_marginals` runs variable elimination once per query variable.
* :func:`projected_minimize` minimises a free energy directly over the local
  polytope with projected gradient steps; it knows nothing about messages.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import null_space
from scipy.special import logsumexp, xlogy

from ._polytope import PolytopeProjector
from .convex_mp import BeliefSet, FreeEnergySpec, free_energy
from .errors import DidNotConverge, TooLarge, WidthTooLarge
from .factor_graph import FactorGraph

logger = logging.getLogger(__name__)

MAX_STATES = 2 ** 20
MAX_TABLE = 2 ** 20
_MEMORY = 10


def brute_force_marginals(graph: FactorGraph):
    """Exact ``(BeliefSet, logZ)`` by enumerating every joint state."""
    cards = graph.cardinalities
    total = int(np.prod(cards, dtype=object))
    if total > MAX_STATES:
        raise TooLarge(f"{total} joint states exceed the enumeration cap of {MAX_STATES}")
    n = graph.num_variables
    logp = np.zeros(cards)
    for f in graph.factors:
        shape = [1] * n
        for i in f.scope:
            shape[i] = cards[i]
        # tables are stored in scope order; bring them into ascending variable order
        t = np.log(f.table).transpose(np.argsort(f.scope)).reshape(shape)
        logp = logp + t
    logz = float(logsumexp(logp))
    p = np.exp(logp - logz)
    var = [p.sum(axis=tuple(k for k in range(n) if k != i)) for i in range(n)]
    fac = []
    for f in graph.factors:
        keep = sorted(f.scope)
        m = p.sum(axis=tuple(k for k in range(n) if k not in keep))
        # m has axes in ascending variable order; return scope order
        fac.append(m.transpose([keep.index(i) for i in f.scope]))
    return BeliefSet(var, fac), logz


# ---------------------------------------------------------------------------
# variable elimination

@dataclass
class _LogFactor:
    vars: tuple
    table: np.ndarray


def _product(factors, cards):
    """Log-domain product over the union of scopes."""
    scope = tuple(sorted({v for f in factors for v in f.vars}))
    size = int(np.prod([cards[v] for v in scope], dtype=object)) if scope else 1
    if size > MAX_TABLE:
        raise WidthTooLarge(f"intermediate table with {size} entries exceeds {MAX_TABLE}")
    out = np.zeros([cards[v] for v in scope])
    for f in factors:
        shape = [cards[v] if v in f.vars else 1 for v in scope]
        order = sorted(range(len(f.vars)), key=lambda k: f.vars[k])
        out = out + f.table.transpose(order).reshape(shape)
    return _LogFactor(scope, out)


def _eliminate(factors, v, cards):
    touching = [f for f in factors if v in f.vars]
    rest = [f for f in factors if v not in f.vars]
    if not touching:
        return rest
    prod = _product(touching, cards)
    ax = prod.vars.index(v)
    summed = logsumexp(prod.table, axis=ax)
    rest.append(_LogFactor(tuple(u for u in prod.vars if u != v), np.asarray(summed)))
    return rest


def elimination_marginals(graph: FactorGraph, order=None) -> BeliefSet:
    """Exact variable marginals by variable elimination along ``order``.

    Each query variable is obtained by eliminating every other variable in
    ``order``. Factor beliefs are not computed (``fac`` is ``None``).
    """
    n = graph.num_variables
    order = list(range(n)) if order is None else list(order)
    if sorted(order) != list(range(n)):
        raise ValueError("order must be a permutation of the variables")
    cards = graph.cardinalities
    base = [_LogFactor(tuple(f.scope), np.log(f.table)) for f in graph.factors]
    var = []
    for q in range(n):
        factors = list(base)
        for v in order:
            if v != q:
                factors = _eliminate(factors, v, cards)
        final = _product(factors, cards)
        assert final.vars == (q,)
        var.append(np.exp(final.table - logsumexp(final.table)))
    return BeliefSet(var, None)


def exact_marginals(graph: FactorGraph) -> BeliefSet:
    """Brute force when small enough, otherwise elimination in index order."""
    if int(np.prod(graph.cardinalities, dtype=object)) <= MAX_STATES:
        return brute_force_marginals(graph)[0]
    return elimination_marginals(graph)


# ---------------------------------------------------------------------------
# projected gradient on the free energy

def _local_polytope(spec: FreeEnergySpec):
    """Constraint matrix over ``[factor tables..., variable beliefs...]``."""
    g = spec.graph
    nf = spec.dimension
    var_off = np.concatenate([[0], np.cumsum(g.cardinalities)]) + nf
    dim = int(var_off[-1])
    rows, cols, vals = [], [], []
    rhs = []
    r = 0
    for i in range(g.num_variables):
        for x in range(g.cardinalities[i]):
            rows.append(r)
            cols.append(int(var_off[i]) + x)
            vals.append(1.0)
        rhs.append(1.0)
        r += 1
    for i, a in g.edges:
        f = g.factors[a]
        ax = g.axis(a, i)
        idx = np.arange(f.size).reshape(f.table.shape) + int(spec.offsets[a])
        for x in range(g.cardinalities[i]):
            sel = np.take(idx, x, axis=ax).reshape(-1)
            rows.extend([r] * sel.size)
            cols.extend(sel.tolist())
            vals.extend([1.0] * sel.size)
            rows.append(r)
            cols.append(int(var_off[i]) + x)
            vals.append(-1.0)
            rhs.append(0.0)
            r += 1
    A = sp.csr_matrix((vals, (rows, cols)), shape=(r, dim))
    return A, np.array(rhs), var_off


@dataclass
class MinimizeResult:
    beliefs: BeliefSet
    free_energy: float
    iterations: int
    converged: bool
    mapping_norm: float
    trace: list = field(default_factory=list)
    wall_time: float = 0.0


class _Objective:
    def __init__(self, spec: FreeEnergySpec, var_off):
        self.E = np.concatenate([spec.join(spec.energies), np.zeros(int(var_off[-1]) - spec.dimension)])
        d = spec.derived
        g = spec.graph
        self.w = np.concatenate(
            [np.full(f.size, d.cbar_fac[f.id]) for f in g.factors]
            + [np.full(g.cardinalities[i], d.cbar_var[i]) for i in range(g.num_variables)])

    def value(self, x):
        return float(self.E @ x + self.w @ xlogy(x, x))

    def grad(self, x):
        return self.E + self.w * (1.0 + np.log(x))


def _unpack(spec, x, var_off):
    g = spec.graph
    fac = [x[spec.slice(f.id)].reshape(f.table.shape).copy() for f in g.factors]
    var = [x[int(var_off[i]):int(var_off[i + 1])].copy() for i in range(g.num_variables)]
    return BeliefSet(var, fac)


def _feasible_newton(obj, A, x, floor, max_iter=100):
    """Damped Newton iterations restricted to ``{A x = const, x > floor}``."""
    Z = null_space(A.toarray())
    fx = obj.value(x)
    for _ in range(max_iter):
        g = Z.T @ obj.grad(x)
        H = Z.T @ (Z * (obj.w / x)[:, None])
        try:
            d = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        dec = float(-g @ d)
        if not dec > 1e-24:
            break
        step = Z @ d
        t = 1.0
        neg = step < 0
        if neg.any():
            t = min(1.0, 0.99 * float(np.min((x[neg] - floor) / -step[neg])))
        if dec <= 1e-12 * (1.0 + abs(fx)):
            # the predicted decrease is below the rounding of F, so judge the
            # step by the reduced gradient instead
            x_new = x + t * step
            if np.abs(Z.T @ obj.grad(x_new)).max() > 0.5 * np.abs(g).max():
                break
            x, fx = x_new, obj.value(x_new)
            continue
        while t > 1e-12:
            x_new = x + t * step
            f_new = obj.value(x_new)
            if f_new <= fx - 1e-4 * t * dec:
                break
            t *= 0.5
        else:
            break
        x, fx = x_new, f_new
    return x


def projected_minimize(spec: FreeEnergySpec, tol: float = 1e-8, max_iter: int = 200_000,
                       criterion: str = "mapping", method: str = "newton",
                       floor: float = 1e-14, full: bool = False):
    """Minimise the free energy of ``spec`` over the local polytope.

    ``method="gradient"`` runs projected gradient steps: the first trial step
    is 1.0, later ones are Barzilai-Borwein steps, each halved until a
    nonmonotone Armijo condition holds. ``method="newton"`` runs damped
    Newton steps on the affine hull of the polytope, which is valid because
    the minimiser is interior; it is far faster on small models.

    ``criterion="mapping"`` certifies the result by the projected-gradient
    mapping ``|x - P(x - grad F(x))|`` being at most ``tol`` in max norm;
    ``criterion="primal"`` (gradient method only) stops when the free energy
    changes by at most ``tol`` between iterations. Beliefs are kept above
    ``floor`` so the entropy gradient stays finite.

    Returns a :class:`BeliefSet`, or the :class:`MinimizeResult` when ``full``.
    """
    if criterion not in ("mapping", "primal"):
        raise ValueError(f"unknown criterion {criterion!r}")
    if method not in ("gradient", "newton"):
        raise ValueError(f"unknown method {method!r}")
    if method == "newton" and criterion != "mapping":
        raise ValueError("the newton method only supports the mapping criterion")
    start = time.perf_counter()
    A, rhs, var_off = _local_polytope(spec)
    projector = PolytopeProjector(A, rhs, floor)
    obj = _Objective(spec, var_off)
    g = spec.graph

    def project(y):
        return projector.project(y, tol=1e-12)

    # uniform beliefs are feasible and interior
    x = np.concatenate([np.full(f.size, 1.0 / f.size) for f in g.factors]
                       + [np.full(k, 1.0 / k) for k in g.cardinalities])
    converged = False
    if method == "newton":
        x = _feasible_newton(obj, A, x, floor)
        trace = [obj.value(x)]
        it = 1
        mapping = float(np.abs(x - project(x - obj.grad(x))).max())
        converged = mapping <= tol
    else:
        x, trace, it, mapping, converged = _gradient(obj, project, x, tol, max_iter, criterion)
    beliefs = _unpack(spec, x, var_off)
    result = MinimizeResult(beliefs, free_energy(spec, beliefs), it, converged, mapping, trace,
                            time.perf_counter() - start)
    if not converged:
        raise DidNotConverge(f"{method} minimisation stopped after {it} iterations "
                             f"(mapping norm {mapping:.3e})", result=result)
    return result if full else beliefs


def _gradient(obj, project, x, tol, max_iter, criterion):
    fx = obj.value(x)
    grad = obj.grad(x)
    trace = [fx]
    mapping = np.inf
    step = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        mapping = float(np.abs(x - project(x - grad)).max())
        if criterion == "mapping" and mapping <= tol:
            return x, trace, it, mapping, True
        # nonmonotone Armijo against the worst of the recent values
        ref = max(trace[-_MEMORY:])
        t = step
        while True:
            x_new = project(x - t * grad)
            f_new = obj.value(x_new)
            if f_new <= ref + 1e-4 * float(grad @ (x_new - x)) or t < 1e-16:
                break
            t *= 0.5
        if not f_new <= ref:
            break
        g_new = obj.grad(x_new)
        s_vec, y_vec = x_new - x, g_new - grad
        sy = float(s_vec @ y_vec)
        step = min(max(float(s_vec @ s_vec) / sy, 1e-12), 1e6) if sy > 0 else 1.0
        change = abs(fx - f_new)
        x, fx, grad = x_new, f_new, g_new
        trace.append(fx)
        if criterion == "primal" and change <= tol:
            return x, trace, it, mapping, True
    return x, trace, it, mapping, False
