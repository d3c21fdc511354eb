"""Plain sum-product belief propagation (no damping)."""

from __future__ import annotations

import numpy as np

from . import _kernels
from .convex_mp import BeliefSet
from .factor_graph import FactorGraph


def _beliefs(graph, log_psi, fac_to_var, var_to_fac):
    var = []
    for i in range(graph.num_variables):
        t = sum(fac_to_var[graph.edge_id(i, a)] for a in graph.neighbors(i))
        p = np.exp(t - t.max())
        var.append(p / p.sum())
    fac = []
    for f in graph.factors:
        t = log_psi[f.id].copy()
        for ax, j in enumerate(f.scope):
            shape = [1] * len(f.scope)
            shape[ax] = -1
            t = t + var_to_fac[graph.edge_id(j, f.id)].reshape(shape)
        p = np.exp(t - t.max())
        fac.append(p / p.sum())
    return BeliefSet(var, fac)


def sum_product_bp(graph: FactorGraph, max_iters: int = 10_000, tol: float = 1e-8,
                   schedule: str = "flooding", full: bool = False):
    """Return ``(beliefs, converged)`` (plus the iteration count when ``full``).

    Messages are max-normalised in the log domain; the run stops when no
    factor-to-variable message moves by more than ``tol`` (max norm,
    probability scale) in one iteration. ``schedule`` is ``"flooding"`` (every
    message computed from the previous iteration) or ``"async"`` (variables in
    index order, each pulling fresh messages from its factors and then
    pushing to them).
    """
    if schedule not in ("flooding", "async"):
        raise ValueError(f"unknown schedule {schedule!r}")
    lay = _BPLayout(graph)
    log_psi = np.concatenate([np.log(f.table).reshape(-1) for f in graph.factors])
    f2v = np.zeros(int(lay.m_off[-1]))
    v2f = np.zeros_like(f2v)
    scratch = np.zeros(max(f.size for f in graph.factors))
    converged, iters = _kernels.bp_run(
        log_psi, f2v, v2f, scratch, schedule == "async", max_iters, tol, lay.var_ptr,
        lay.var_edges, lay.edge_fac, lay.edge_var, lay.stride, lay.card, lay.fac_ptr,
        lay.fac_edges, lay.fac_off, lay.m_off)
    f2v_l = [f2v[lay.m_off[k]:lay.m_off[k + 1]] for k in range(len(graph.edges))]
    v2f_l = [v2f[lay.m_off[k]:lay.m_off[k + 1]] for k in range(len(graph.edges))]
    beliefs = _beliefs(graph, [np.log(f.table) for f in graph.factors], f2v_l, v2f_l)
    if full:
        return beliefs, bool(converged), int(iters)
    return beliefs, bool(converged)


class _BPLayout:
    def __init__(self, graph: FactorGraph):
        i64 = np.int64
        var_edges = [[graph.edge_id(i, a) for a in graph.neighbors(i)]
                     for i in range(graph.num_variables)]
        fac_edges = [[graph.edge_id(i, f.id) for i in f.scope] for f in graph.factors]
        self.var_ptr = np.cumsum([0] + [len(e) for e in var_edges]).astype(i64)
        self.var_edges = np.array([k for e in var_edges for k in e], dtype=i64)
        self.fac_ptr = np.cumsum([0] + [len(e) for e in fac_edges]).astype(i64)
        self.fac_edges = np.array([k for e in fac_edges for k in e], dtype=i64)
        self.fac_off = np.cumsum([0] + [f.size for f in graph.factors]).astype(i64)
        self.edge_fac = np.array([a for _, a in graph.edges], dtype=i64)
        self.edge_var = np.array([i for i, _ in graph.edges], dtype=i64)
        self.card = np.array(graph.cardinalities, dtype=i64)
        self.m_off = np.cumsum([0] + [graph.cardinalities[i] for i, _ in graph.edges]).astype(i64)
        self.stride = np.array(
            [int(np.prod(graph.factors[a].table.shape[graph.axis(a, i) + 1:], dtype=i64))
             for i, a in graph.edges], dtype=i64)
