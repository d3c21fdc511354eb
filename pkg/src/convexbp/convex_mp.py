"""Convergent message passing for convex free energies.

The free energy over factor beliefs ``b_a`` and variable beliefs ``b_i`` is::

    F = sum_a <E_a, b_a> - sum_a c_a H(b_a) - sum_i c_i H(b_i)
        + sum_{i, a ni i} c_ia (H(b_i) - H(b_a))

minimised over the local marginal polytope. Eliminating ``b_i`` and
splitting the objective as ``f(b) + sum_i h_i(b)``, with::

    f(b)   = sum_a <E_a, b_a> - c_a H(b_a)
    h_i(b) = -(c_i - sum_a c_ia) H(q_i) - sum_{a ni i} c_ia H(b_a)

restricted to normalised factor tables whose ``x_i`` marginals agree on a
shared ``q_i``, turns the problem into the form handled by
:mod:`convexbp.block_engine`, with one block per variable.

Block ``i`` at scale ``s`` (1 sequential, ``1/n`` parallel) has the closed
form solution, with ``kappa_ia = s c_a + c_ia`` and ``chat_i = c_i + s sum_a c_a``::

    L_ia(x_a)  = -(s E_a(x_a) + mu_ia(x_a)) / kappa_ia
    m_ia(x_i)  = sum_{x_a \\ x_i} exp(L_ia)
    q_i(x_i)  ~= prod_a m_ia(x_i) ** (kappa_ia / chat_i)
    b_a(x_a)   = q_i(x_i) exp(L_ia(x_a)) / m_ia(x_i)

and the multiplier returned to factor ``a`` is, up to an additive constant,
``lam_ia = c_ia L_ia - s c_a (ln q_i - ln m_ia)``. Messages are kept in the
log domain as ``log n_ia = -lam_ia``, max-normalised after each update;
additive constants per table do not change any belief.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import xlogy

from . import _kernels
from .block_engine import BlockProblem
from .counting import CountingNumbers, DerivedConstants, check_admissible, derive_constants
from .errors import ConvexBPError, DidNotConverge, NonFiniteValue
from .factor_graph import FactorGraph

logger = logging.getLogger(__name__)

DEFAULT_STOP_TOL = 1e-5
DEFAULT_MAX_ITERS = 10_000


class NonFiniteMessage(NonFiniteValue):
    pass


def entropy(p: np.ndarray) -> float:
    return -float(np.sum(xlogy(p, p)))


def _lse(x: np.ndarray, axes) -> np.ndarray:
    if not axes:
        return x
    mx = x.max(axis=axes, keepdims=True)
    out = np.log(np.exp(x - mx).sum(axis=axes, keepdims=True)) + mx
    return out.reshape(-1)


def _lse_vec(x: np.ndarray) -> float:
    mx = x.max()
    return float(np.log(np.exp(x - mx).sum()) + mx)


@dataclass
class BeliefSet:
    """Normalised variable beliefs and (optionally) factor beliefs."""

    var: list
    fac: Optional[list] = None

    def max_consistency_violation(self, graph: FactorGraph) -> float:
        if self.fac is None:
            return float("nan")
        worst = 0.0
        for f in graph.factors:
            for ax, i in enumerate(f.scope):
                other = tuple(k for k in range(len(f.scope)) if k != ax)
                marg = self.fac[f.id].sum(axis=other) if other else self.fac[f.id]
                worst = max(worst, float(np.abs(marg - self.var[i]).max()))
        return worst

    def max_normalization_error(self) -> float:
        tables = list(self.var) + list(self.fac or [])
        return max(abs(float(t.sum()) - 1.0) for t in tables)

    def distance(self, other: "BeliefSet", factors: bool = True) -> float:
        """Max-norm distance between two belief sets."""
        d = max(float(np.abs(a - b).max()) for a, b in zip(self.var, other.var))
        if factors and self.fac is not None and other.fac is not None:
            d = max(d, max(float(np.abs(a - b).max()) for a, b in zip(self.fac, other.fac)))
        return d


@dataclass
class FreeEnergySpec:
    graph: FactorGraph
    counting: CountingNumbers
    derived: DerivedConstants
    energies: list
    offsets: np.ndarray

    @property
    def dimension(self) -> int:
        return int(self.offsets[-1])

    def slice(self, a: int) -> slice:
        return slice(int(self.offsets[a]), int(self.offsets[a + 1]))

    def split(self, b: np.ndarray) -> list:
        return [b[self.slice(f.id)].reshape(f.table.shape) for f in self.graph.factors]

    def join(self, tables) -> np.ndarray:
        return np.concatenate([np.asarray(t, dtype=float).reshape(-1) for t in tables])


def make_spec(graph: FactorGraph, counting: CountingNumbers, check: bool = True) -> FreeEnergySpec:
    """Bundle a graph with its counting numbers; warns when they are not admissible."""
    derived = derive_constants(graph, counting)
    if check:
        report = check_admissible(graph, counting, tol=1e-8)
        if not report.admissible:
            warnings.warn(
                f"counting numbers are not admissible (max residual {report.max_residual:.2e}, "
                f"{len(report.sign_violations)} sign violations); convexity is not guaranteed",
                RuntimeWarning, stacklevel=2)
    if np.any(derived.chat_var <= 0) or np.any(derived.chat_edge <= 0):
        raise ConvexBPError("chat constants must be positive (need c_a > 0)")
    energies = [f.energy for f in graph.factors]
    offsets = np.concatenate([[0], np.cumsum([f.size for f in graph.factors])])
    return FreeEnergySpec(graph, counting, derived, energies, offsets)


# ---------------------------------------------------------------------------
# free energy

def free_energy(spec: FreeEnergySpec, beliefs: BeliefSet) -> float:
    g, c = spec.graph, spec.counting
    value = 0.0
    h_fac = [entropy(t) for t in beliefs.fac]
    h_var = [entropy(t) for t in beliefs.var]
    for a, t in enumerate(beliefs.fac):
        if np.any((t > 0) & ~np.isfinite(spec.energies[a])):
            raise NonFiniteValue(f"factor {a} puts mass on a zero-potential state")
        value += float(np.sum(spec.energies[a] * t)) - c.c_fac[a] * h_fac[a]
    for i in range(g.num_variables):
        value -= c.c_var[i] * h_var[i]
    for k, (i, a) in enumerate(g.edges):
        value += c.c_edge[k] * (h_var[i] - h_fac[a])
    return value


def free_energy_gradient(spec: FreeEnergySpec, beliefs: BeliefSet):
    """Partial derivatives ``(dF/db_a, dF/db_i)`` at strictly positive beliefs."""
    g, c, d = spec.graph, spec.counting, spec.derived
    grad_fac = [spec.energies[a] + d.cbar_fac[a] * (1.0 + np.log(t))
                for a, t in enumerate(beliefs.fac)]
    grad_var = [d.cbar_var[i] * (1.0 + np.log(t)) for i, t in enumerate(beliefs.var)]
    return grad_fac, grad_var


# ---------------------------------------------------------------------------
# block-problem instantiation

class FreeEnergyTerm:
    """``f(b) = sum_a <E_a, b_a> + c_a sum b_a ln b_a`` on the stacked factor tables."""

    def __init__(self, spec: FreeEnergySpec):
        self.E = spec.join(spec.energies)
        self.c = np.concatenate([np.full(f.size, spec.counting.c_fac[f.id])
                                 for f in spec.graph.factors])

    def value(self, b):
        if np.any(b < 0):
            return np.inf
        return float(self.E @ b + self.c @ xlogy(b, b))

    def grad(self, b):
        return self.E + self.c * (1.0 + np.log(b))

    def argmin_linear(self, v, scale):
        # factors outside a block can sit far from their optimum before their
        # first visit; clipping keeps the stacked vector finite
        z = -(scale * self.E + v) / (scale * self.c) - 1.0
        return np.exp(np.minimum(z, 700.0))

    def conjugate_min(self, v, scale):
        return -float(scale * self.c @ self.argmin_linear(v, scale))


class VariableBlock:
    """``h_i`` for variable ``i`` with its exact closed-form block minimiser."""

    def __init__(self, spec: FreeEnergySpec, i: int):
        g = spec.graph
        self.spec = spec
        self.i = i
        self.factors = list(g.neighbors(i))
        self.axes = [g.axis(a, i) for a in self.factors]
        self.c_ia = np.array([spec.counting.edge(g, i, a) for a in self.factors])
        self.c_a = np.array([spec.counting.c_fac[a] for a in self.factors])
        self.c_i = float(spec.counting.c_var[i])
        self.support = np.concatenate([np.arange(spec.offsets[a], spec.offsets[a + 1])
                                       for a in self.factors])

    def _other_axes(self, k):
        nd = len(self.spec.graph.scope(self.factors[k]))
        return tuple(ax for ax in range(nd) if ax != self.axes[k])

    def _expand(self, k, vec):
        nd = len(self.spec.graph.scope(self.factors[k]))
        shape = [1] * nd
        shape[self.axes[k]] = -1
        return vec.reshape(shape)

    def solve(self, mu_tables, scale):
        """Block minimiser on the support: returns ``(q, [b_a], [L_a], [log m_a])``."""
        kappa = scale * self.c_a + self.c_ia
        chat = self.c_i + scale * self.c_a.sum()
        L, logm = [], []
        logq = np.zeros(self.spec.graph.cardinalities[self.i])
        for k, a in enumerate(self.factors):
            Lk = -(scale * self.spec.energies[a] + mu_tables[k]) / kappa[k]
            lm = _lse(Lk, self._other_axes(k))
            L.append(Lk)
            logm.append(lm)
            logq += (kappa[k] / chat) * lm
        logq -= _lse_vec(logq)
        tables = [np.exp(self._expand(k, logq - logm[k]) + L[k]) for k in range(len(L))]
        return np.exp(logq), tables, L, logm

    def argmin(self, f, mu, scale):
        spec = self.spec
        b = f.argmin_linear(mu, scale)
        mu_tables = [mu[spec.slice(a)].reshape(spec.graph.factors[a].table.shape)
                     for a in self.factors]
        _, tables, _, _ = self.solve(mu_tables, scale)
        for a, t in zip(self.factors, tables):
            b[spec.slice(a)] = t.reshape(-1)
        return b

    def marginals(self, b):
        spec = self.spec
        out = []
        for k, a in enumerate(self.factors):
            t = b[spec.slice(a)].reshape(spec.graph.factors[a].table.shape)
            other = self._other_axes(k)
            out.append(t.sum(axis=other) if other else t.copy())
        return out

    def in_domain(self, b, tol=1e-9):
        spec = self.spec
        for a in self.factors:
            t = b[spec.slice(a)]
            if np.any(t < -tol) or abs(t.sum() - 1.0) > tol:
                return False
        margs = self.marginals(b)
        return all(np.abs(m - margs[0]).max() <= tol for m in margs[1:])

    def value(self, b):
        """``h_i(b)``, infinite off the domain."""
        if not self.in_domain(b):
            return np.inf
        spec = self.spec
        q = self.marginals(b)[0]
        cbar_i = self.c_i - self.c_ia.sum()
        val = -cbar_i * entropy(q)
        for k, a in enumerate(self.factors):
            val -= self.c_ia[k] * entropy(b[spec.slice(a)])
        return val

    def conjugate(self, lam):
        """``max_b <b, lam> - h_i(b)`` over the domain (only support coordinates count)."""
        spec = self.spec
        A = np.zeros(spec.graph.cardinalities[self.i])
        for k, a in enumerate(self.factors):
            t = lam[spec.slice(a)].reshape(spec.graph.factors[a].table.shape)
            other = self._other_axes(k)
            if self.c_ia[k] > 0:
                A += self.c_ia[k] * _lse(t / self.c_ia[k], other)
            else:
                A += t.max(axis=other).reshape(-1) if other else t.reshape(-1)
        if self.c_i > 0:
            return self.c_i * _lse_vec(A / self.c_i)
        return float(A.max())


def vector_to_beliefs(spec: FreeEnergySpec, b: np.ndarray) -> BeliefSet:
    """Normalised factor tables from a stacked vector; ``b_i`` is the mean of the factor marginals."""
    g = spec.graph
    fac = [t / t.sum() for t in spec.split(b)]
    var = []
    for i in range(g.num_variables):
        acc = np.zeros(g.cardinalities[i])
        for a in g.neighbors(i):
            ax = g.axis(a, i)
            other = tuple(k for k in range(fac[a].ndim) if k != ax)
            acc += fac[a].sum(axis=other) if other else fac[a]
        var.append(acc / g.degree(i))
    return BeliefSet(var, fac)


def build_block_problem(spec: FreeEnergySpec) -> BlockProblem:
    f = FreeEnergyTerm(spec)
    blocks = [VariableBlock(spec, i) for i in range(spec.graph.num_variables)]
    return BlockProblem(spec.dimension, f, blocks,
                        primal=lambda b: free_energy(spec, vector_to_beliefs(spec, b)))


# ---------------------------------------------------------------------------
# message passing

@dataclass
class MessageSet:
    """Log-domain messages per incidence ``k`` (indexing ``graph.edges``).

    ``log_n[k]`` is the variable-to-factor table over the factor's joint
    states; ``log_m[k]`` the factor-to-variable table over the variable's
    states (kept from the most recent update, used for diagnostics).
    """

    log_n: list
    log_m: list

    @classmethod
    def initial(cls, graph: FactorGraph) -> "MessageSet":
        log_n = [np.zeros(graph.factors[a].table.shape) for _, a in graph.edges]
        log_m = [np.zeros(graph.cardinalities[i]) for i, _ in graph.edges]
        return cls(log_n, log_m)

    def copy(self) -> "MessageSet":
        return MessageSet([t.copy() for t in self.log_n], [t.copy() for t in self.log_m])


class _Layout:
    """Per-spec index tables reused across sweeps."""

    def __init__(self, spec: FreeEnergySpec):
        g = spec.graph
        self.var_edges = [[g.edge_id(i, a) for a in g.neighbors(i)] for i in range(g.num_variables)]
        self.fac_edges = [[g.edge_id(i, f.id) for i in f.scope] for f in g.factors]
        self.edge_factor = [a for _, a in g.edges]
        self.edge_axis = [g.axis(a, i) for i, a in g.edges]
        self.other_axes = []
        self.expand_shape = []
        for i, a in g.edges:
            nd = len(g.scope(a))
            ax = g.axis(a, i)
            self.other_axes.append(tuple(k for k in range(nd) if k != ax))
            shape = [1] * nd
            shape[ax] = -1
            self.expand_shape.append(tuple(shape))


def _layout(spec: FreeEnergySpec) -> _Layout:
    lay = getattr(spec, "_layout_cache", None)
    if lay is None:
        lay = _Layout(spec)
        spec._layout_cache = lay
    return lay


def _factor_totals(spec, log_n, lay):
    return [sum(log_n[k] for k in lay.fac_edges[a]) for a in range(spec.graph.num_factors)]


def _variable_update(spec, lay, i, neg_mu, scale):
    """Closed-form block update of variable ``i`` from ``-mu`` tables.

    Returns ``(logq, new_log_n, log_m, factor_tables)``.
    """
    c, d = spec.counting, spec.derived
    edges = lay.var_edges[i]
    chat = c.c_var[i] + scale * sum(c.c_fac[lay.edge_factor[k]] for k in edges)
    L, logm = [], []
    logq = 0.0
    for k, S in zip(edges, neg_mu):
        a = lay.edge_factor[k]
        kappa = scale * c.c_fac[a] + c.c_edge[k]
        Lk = (S - scale * spec.energies[a]) / kappa
        lm = _lse(Lk, lay.other_axes[k])
        L.append(Lk)
        logm.append(lm)
        logq = logq + (kappa / chat) * lm
    logq = logq - _lse_vec(logq)
    new_n, tables = [], []
    for k, Lk, lm in zip(edges, L, logm):
        a = lay.edge_factor[k]
        shift = (logq - lm).reshape(lay.expand_shape[k])
        t = scale * c.c_fac[a] * shift - c.c_edge[k] * Lk
        t = t - t.max()
        if not np.all(np.isfinite(t)):
            raise NonFiniteMessage(f"non-finite message from variable {i} to factor {a}")
        new_n.append(t)
        tables.append(np.exp(shift + Lk))
    return logq, new_n, logm, tables


def sequential_sweep(spec: FreeEnergySpec, messages: MessageSet,
                     order: Optional[Sequence[int]] = None, record: Optional[list] = None) -> MessageSet:
    """One pass of block updates over the variables in ``order`` (default ascending).

    When ``record`` is a list, ``(i, q_i, [b_a for a in N(i)])`` is appended for
    every block update.
    """
    lay = _layout(spec)
    out = messages.copy()
    totals = _factor_totals(spec, out.log_n, lay)
    order = range(spec.graph.num_variables) if order is None else order
    for i in order:
        edges = lay.var_edges[i]
        neg_mu = [totals[lay.edge_factor[k]] - out.log_n[k] for k in edges]
        logq, new_n, logm, tables = _variable_update(spec, lay, i, neg_mu, 1.0)
        for k, t, lm, S in zip(edges, new_n, logm, neg_mu):
            out.log_n[k] = t
            out.log_m[k] = lm
            totals[lay.edge_factor[k]] = S + t
        if record is not None:
            record.append((i, np.exp(logq), tables))
    return out


def parallel_step(spec: FreeEnergySpec, messages: MessageSet, record: Optional[list] = None) -> MessageSet:
    """One synchronous round; every update reads only ``messages``."""
    lay = _layout(spec)
    n = spec.graph.num_variables
    s = 1.0 / n
    totals = _factor_totals(spec, messages.log_n, lay)
    out = messages.copy()
    for i in range(n):
        edges = lay.var_edges[i]
        # -mu_ia = log n_ia ... in multiplier form: lam_ia - mean_j lam_ja
        neg_mu = [s * totals[lay.edge_factor[k]] - messages.log_n[k] for k in edges]
        logq, new_n, logm, tables = _variable_update(spec, lay, i, neg_mu, s)
        for k, t, lm in zip(edges, new_n, logm):
            out.log_n[k] = t
            out.log_m[k] = lm
        if record is not None:
            record.append((i, np.exp(logq), tables))
    return out


def beliefs_from_messages(spec: FreeEnergySpec, messages: MessageSet) -> BeliefSet:
    """Variable beliefs from the sequential block formula, factor beliefs from
    ``(psi_a prod_j n_ja) ** (1 / c_a)``, both normalised."""
    lay = _layout(spec)
    g, c = spec.graph, spec.counting
    totals = _factor_totals(spec, messages.log_n, lay)
    var = []
    for i in range(g.num_variables):
        edges = lay.var_edges[i]
        neg_mu = [totals[lay.edge_factor[k]] - messages.log_n[k] for k in edges]
        chat = spec.derived.chat_var[i]
        logq = 0.0
        for k, S in zip(edges, neg_mu):
            a = lay.edge_factor[k]
            kappa = spec.derived.chat_edge[k]
            logq = logq + (kappa / chat) * _lse((S - spec.energies[a]) / kappa, lay.other_axes[k])
        logq = logq - _lse_vec(logq)
        var.append(np.exp(logq))
    fac = []
    for a in range(g.num_factors):
        t = (totals[a] - spec.energies[a]) / c.c_fac[a]
        t = np.exp(t - t.max())
        fac.append(t / t.sum())
    return BeliefSet(var, fac)


# ---------------------------------------------------------------------------

@dataclass
class RunTrace:
    free_energy: list = field(default_factory=list)
    consistency: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)


@dataclass
class RunResult:
    beliefs: BeliefSet
    messages: MessageSet
    trace: RunTrace
    converged: bool
    iterations: int

    @property
    def free_energy(self) -> float:
        return self.trace.free_energy[-1]


class _Flat:
    """Flat arrays for the compiled kernels (see :mod:`convexbp._kernels`)."""

    def __init__(self, spec: FreeEnergySpec):
        g, c = spec.graph, spec.counting
        lay = _layout(spec)
        n, m, K = g.num_variables, g.num_factors, len(g.edges)
        i64 = np.int64
        self.card = np.array(g.cardinalities, dtype=i64)
        self.var_ptr = np.concatenate([[0], np.cumsum([len(e) for e in lay.var_edges])]).astype(i64)
        self.var_edges = np.array([k for e in lay.var_edges for k in e], dtype=i64)
        self.fac_ptr = np.concatenate([[0], np.cumsum([len(e) for e in lay.fac_edges])]).astype(i64)
        self.fac_edges = np.array([k for e in lay.fac_edges for k in e], dtype=i64)
        self.fac_off = spec.offsets.astype(i64)
        self.edge_fac = np.array(lay.edge_factor, dtype=i64)
        sizes = np.array([g.factors[a].size for a in lay.edge_factor], dtype=i64)
        self.msg_off = np.concatenate([[0], np.cumsum(sizes)]).astype(i64)
        self.m_off = np.concatenate([[0], np.cumsum([g.cardinalities[i] for i, _ in g.edges])]).astype(i64)
        self.var_off = np.concatenate([[0], np.cumsum(g.cardinalities)]).astype(i64)
        stride = []
        for i, a in g.edges:
            shape = g.factors[a].table.shape
            stride.append(int(np.prod(shape[g.axis(a, i) + 1:], dtype=i64)))
        self.stride = np.array(stride, dtype=i64)
        self.E = spec.join(spec.energies)
        self.c_var = np.array(c.c_var, dtype=float)
        self.c_fac = np.array(c.c_fac, dtype=float)
        self.c_edge = np.array(c.c_edge, dtype=float)
        total = int(self.msg_off[-1])
        self.totals = np.zeros(int(self.fac_off[-1]))
        self.scratch_mu = np.zeros(total)
        self.scratch_L = np.zeros(total)
        self.logq = np.zeros(int(self.card.max()))
        self.scratch = np.zeros(max(f.size for f in g.factors))
        self.var_b = np.zeros(int(self.var_off[-1]))
        self.fac_b = np.zeros(int(self.fac_off[-1]))
        self.K = K
        self.n = n

    def pack(self, messages: MessageSet):
        log_n = np.concatenate([t.reshape(-1) for t in messages.log_n])
        log_m = np.concatenate(messages.log_m)
        return log_n, log_m

    def unpack(self, spec, log_n, log_m) -> MessageSet:
        g = spec.graph
        out_n = [log_n[self.msg_off[k]:self.msg_off[k + 1]].reshape(g.factors[a].table.shape).copy()
                 for k, (_, a) in enumerate(g.edges)]
        out_m = [log_m[self.m_off[k]:self.m_off[k + 1]].copy() for k in range(self.K)]
        return MessageSet(out_n, out_m)

    def sweep(self, log_n, log_m, order):
        return _kernels.sequential_sweep(
            order, log_n, log_m, self.totals, self.scratch_mu, self.scratch_L, self.logq,
            self.var_ptr, self.var_edges, self.edge_fac, self.stride, self.card, self.fac_ptr,
            self.fac_edges, self.fac_off, self.msg_off, self.m_off, self.E, self.c_var,
            self.c_fac, self.c_edge)

    def round(self, log_n, out_n, log_m):
        return _kernels.parallel_step(
            log_n, out_n, log_m, self.totals, self.scratch_mu, self.scratch_L, self.logq,
            self.var_ptr, self.var_edges, self.edge_fac, self.stride, self.card, self.fac_ptr,
            self.fac_edges, self.fac_off, self.msg_off, self.m_off, self.E, self.c_var,
            self.c_fac, self.c_edge)

    def evaluate(self, log_n):
        return _kernels.beliefs(
            log_n, self.totals, self.var_b, self.var_off, self.fac_b, self.logq, self.scratch,
            self.var_ptr, self.var_edges, self.edge_fac, self.stride, self.card, self.fac_ptr,
            self.fac_edges, self.fac_off, self.msg_off, self.E, self.c_var, self.c_fac, self.c_edge)

    def belief_set(self, spec) -> BeliefSet:
        g = spec.graph
        var = [self.var_b[self.var_off[i]:self.var_off[i + 1]].copy() for i in range(self.n)]
        fac = [self.fac_b[spec.slice(f.id)].reshape(f.table.shape).copy() for f in g.factors]
        return BeliefSet(var, fac)


def _flat(spec: FreeEnergySpec) -> _Flat:
    flat = getattr(spec, "_flat_cache", None)
    if flat is None:
        flat = _Flat(spec)
        spec._flat_cache = flat
    return flat


def run(spec: FreeEnergySpec, schedule: str = "sequential", stop_tol: float = DEFAULT_STOP_TOL,
        max_iters: int = DEFAULT_MAX_ITERS, messages: Optional[MessageSet] = None,
        raise_on_cap: bool = True, order: Optional[Sequence[int]] = None,
        compiled: bool = True) -> RunResult:
    """Iterate sweeps (or rounds) until the free energy changes by at most ``stop_tol``.

    The free energy is evaluated at :func:`beliefs_from_messages` after every
    iteration. Hitting ``max_iters`` raises :class:`DidNotConverge` carrying
    the last :class:`RunResult`, unless ``raise_on_cap`` is false.
    ``compiled=False`` uses the plain numpy updates instead of the compiled
    kernels (same arithmetic, much slower).
    """
    if schedule in ("sequential", "seq"):
        parallel = False
    elif schedule in ("parallel", "par"):
        parallel = True
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    if parallel and order is not None:
        raise ValueError("a block order only applies to the sequential schedule")
    msgs = MessageSet.initial(spec.graph) if messages is None else messages
    n = spec.graph.num_variables
    order = np.arange(n) if order is None else np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(n)):
        raise ValueError("order must be a permutation of the variables")
    trace = RunTrace()
    start = time.perf_counter()

    if compiled:
        flat = _flat(spec)
        log_n, log_m = flat.pack(msgs)
        spare = log_n.copy()

        def step():
            nonlocal log_n, spare
            if parallel:
                ok = flat.round(log_n, spare, log_m)
                log_n, spare = spare, log_n
            else:
                ok = flat.sweep(log_n, log_m, order)
            if not ok:
                raise NonFiniteMessage("a message became non-finite")

        def evaluate():
            return flat.evaluate(log_n)

        def finish():
            return flat.belief_set(spec), flat.unpack(spec, log_n, log_m)
    else:
        def step():
            nonlocal msgs
            msgs = parallel_step(spec, msgs) if parallel else sequential_sweep(spec, msgs, order)

        def evaluate():
            b = beliefs_from_messages(spec, msgs)
            return free_energy(spec, b), b.max_consistency_violation(spec.graph)

        def finish():
            return beliefs_from_messages(spec, msgs), msgs

    prev, _ = evaluate()
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        step()
        value, cons = evaluate()
        if not np.isfinite(value):
            raise NonFiniteValue(f"free energy became non-finite at iteration {it}")
        trace.free_energy.append(value)
        trace.consistency.append(cons)
        trace.wall_time.append(time.perf_counter() - start)
        if abs(value - prev) <= stop_tol:
            converged = True
            break
        prev = value
    beliefs, msgs = finish()
    result = RunResult(beliefs, msgs, trace, converged, it)
    if not converged and raise_on_cap:
        raise DidNotConverge(f"{schedule} message passing did not converge in {max_iters} iterations",
                             result=result, trace=trace)
    return result
