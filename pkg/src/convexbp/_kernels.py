"""Compiled message-passing kernels on a flat layout.

Every incidence ``k = (i, a)`` owns a message table with the shape of factor
``a``, stored at ``msg_off[k]:msg_off[k + 1]``; entry ``s`` of that table has
``x_i = (s // stride[k]) % card[i]``. Factor tables (energies and running
message totals) live at ``fac_off[a]:fac_off[a + 1]``.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _update(i, scale, neg_mu, L, logq, lm, new_n, var_ptr, var_edges, edge_fac, stride,
            card, fac_off, msg_off, m_off, E, c_var, c_fac, c_edge):
    """Closed-form block update of variable ``i``; ``neg_mu`` holds ``-mu`` tables."""
    ci = card[i]
    chat = c_var[i]
    for p in range(var_ptr[i], var_ptr[i + 1]):
        chat += scale * c_fac[edge_fac[var_edges[p]]]
    for x in range(ci):
        logq[x] = 0.0
    for p in range(var_ptr[i], var_ptr[i + 1]):
        k = var_edges[p]
        a = edge_fac[k]
        kappa = scale * c_fac[a] + c_edge[k]
        f0 = fac_off[a]
        m0 = msg_off[k]
        size = fac_off[a + 1] - f0
        st = stride[k]
        mo = m_off[k]
        for x in range(ci):
            lm[mo + x] = -np.inf
        for s in range(size):
            v = (neg_mu[m0 + s] - scale * E[f0 + s]) / kappa
            L[m0 + s] = v
            x = (s // st) % ci
            if v > lm[mo + x]:
                lm[mo + x] = v
        # lm holds maxima; turn them into log-sum-exp values
        for x in range(ci):
            mx = lm[mo + x]
            acc = 0.0
            for s in range(size):
                if (s // st) % ci == x:
                    acc += np.exp(L[m0 + s] - mx)
            lm[mo + x] = mx + np.log(acc)
        for x in range(ci):
            logq[x] += (kappa / chat) * lm[mo + x]
    mx = -np.inf
    for x in range(ci):
        if logq[x] > mx:
            mx = logq[x]
    acc = 0.0
    for x in range(ci):
        acc += np.exp(logq[x] - mx)
    norm = mx + np.log(acc)
    for x in range(ci):
        logq[x] -= norm
    ok = True
    for p in range(var_ptr[i], var_ptr[i + 1]):
        k = var_edges[p]
        a = edge_fac[k]
        m0 = msg_off[k]
        size = fac_off[a + 1] - fac_off[a]
        st = stride[k]
        mo = m_off[k]
        w = scale * c_fac[a]
        top = -np.inf
        for s in range(size):
            x = (s // st) % ci
            t = w * (logq[x] - lm[mo + x]) - c_edge[k] * L[m0 + s]
            new_n[m0 + s] = t
            if t > top:
                top = t
        if not np.isfinite(top):
            ok = False
        for s in range(size):
            new_n[m0 + s] -= top
    return ok


@njit(cache=True)
def _totals(log_n, totals, fac_ptr, fac_edges, fac_off, msg_off):
    for a in range(fac_ptr.size - 1):
        f0 = fac_off[a]
        size = fac_off[a + 1] - f0
        for s in range(size):
            totals[f0 + s] = 0.0
        for p in range(fac_ptr[a], fac_ptr[a + 1]):
            m0 = msg_off[fac_edges[p]]
            for s in range(size):
                totals[f0 + s] += log_n[m0 + s]


@njit(cache=True)
def sequential_sweep(order, log_n, log_m, totals, scratch_mu, scratch_L, logq, var_ptr, var_edges,
                     edge_fac, stride, card, fac_ptr, fac_edges, fac_off, msg_off, m_off, E,
                     c_var, c_fac, c_edge):
    """One in-place sweep; returns False if a message became non-finite."""
    _totals(log_n, totals, fac_ptr, fac_edges, fac_off, msg_off)
    for i in order:
        for p in range(var_ptr[i], var_ptr[i + 1]):
            k = var_edges[p]
            a = edge_fac[k]
            f0 = fac_off[a]
            m0 = msg_off[k]
            for s in range(fac_off[a + 1] - f0):
                scratch_mu[m0 + s] = totals[f0 + s] - log_n[m0 + s]
        if not _update(i, 1.0, scratch_mu, scratch_L, logq, log_m, log_n, var_ptr, var_edges,
                       edge_fac, stride, card, fac_off, msg_off, m_off, E, c_var, c_fac, c_edge):
            return False
        for p in range(var_ptr[i], var_ptr[i + 1]):
            k = var_edges[p]
            a = edge_fac[k]
            f0 = fac_off[a]
            m0 = msg_off[k]
            for s in range(fac_off[a + 1] - f0):
                totals[f0 + s] = scratch_mu[m0 + s] + log_n[m0 + s]
    return True


@njit(cache=True)
def parallel_step(log_n, out_n, log_m, totals, scratch_mu, scratch_L, logq, var_ptr, var_edges,
                  edge_fac, stride, card, fac_ptr, fac_edges, fac_off, msg_off, m_off, E,
                  c_var, c_fac, c_edge):
    """One synchronous round reading ``log_n`` and writing ``out_n``."""
    n = var_ptr.size - 1
    scale = 1.0 / n
    _totals(log_n, totals, fac_ptr, fac_edges, fac_off, msg_off)
    for k in range(edge_fac.size):
        a = edge_fac[k]
        f0 = fac_off[a]
        m0 = msg_off[k]
        for s in range(fac_off[a + 1] - f0):
            scratch_mu[m0 + s] = scale * totals[f0 + s] - log_n[m0 + s]
    for i in range(n):
        if not _update(i, scale, scratch_mu, scratch_L, logq, log_m, out_n, var_ptr, var_edges,
                       edge_fac, stride, card, fac_off, msg_off, m_off, E, c_var, c_fac, c_edge):
            return False
    return True


@njit(cache=True)
def beliefs(log_n, totals, var_b, var_off, fac_b, logq, scratch, var_ptr, var_edges, edge_fac,
            stride, card, fac_ptr, fac_edges, fac_off, msg_off, E, c_var, c_fac, c_edge):
    """Fill ``var_b`` and ``fac_b`` from messages; return ``(F, consistency)``."""
    _totals(log_n, totals, fac_ptr, fac_edges, fac_off, msg_off)
    n = var_ptr.size - 1
    m = fac_ptr.size - 1
    # factor beliefs (psi_a prod_j n_ja) ** (1 / c_a)
    h_fac = np.zeros(m)
    F = 0.0
    for a in range(m):
        f0 = fac_off[a]
        size = fac_off[a + 1] - f0
        mx = -np.inf
        for s in range(size):
            v = (totals[f0 + s] - E[f0 + s]) / c_fac[a]
            fac_b[f0 + s] = v
            if v > mx:
                mx = v
        acc = 0.0
        for s in range(size):
            fac_b[f0 + s] = np.exp(fac_b[f0 + s] - mx)
            acc += fac_b[f0 + s]
        h = 0.0
        en = 0.0
        for s in range(size):
            b = fac_b[f0 + s] / acc
            fac_b[f0 + s] = b
            en += E[f0 + s] * b
            if b > 0.0:
                h -= b * np.log(b)
        h_fac[a] = h
        F += en - c_fac[a] * h
    cons = 0.0
    for i in range(n):
        ci = card[i]
        chat = c_var[i]
        for p in range(var_ptr[i], var_ptr[i + 1]):
            chat += c_fac[edge_fac[var_edges[p]]]
        for x in range(ci):
            logq[x] = 0.0
        for p in range(var_ptr[i], var_ptr[i + 1]):
            k = var_edges[p]
            a = edge_fac[k]
            kappa = c_fac[a] + c_edge[k]
            f0 = fac_off[a]
            m0 = msg_off[k]
            size = fac_off[a + 1] - f0
            st = stride[k]
            for x in range(ci):
                mx = -np.inf
                for s in range(size):
                    if (s // st) % ci == x:
                        v = (totals[f0 + s] - log_n[m0 + s] - E[f0 + s]) / kappa
                        scratch[s] = v
                        if v > mx:
                            mx = v
                acc = 0.0
                for s in range(size):
                    if (s // st) % ci == x:
                        acc += np.exp(scratch[s] - mx)
                logq[x] += (kappa / chat) * (mx + np.log(acc))
        mx = -np.inf
        for x in range(ci):
            if logq[x] > mx:
                mx = logq[x]
        acc = 0.0
        for x in range(ci):
            acc += np.exp(logq[x] - mx)
        v0 = var_off[i]
        h = 0.0
        for x in range(ci):
            b = np.exp(logq[x] - mx) / acc
            var_b[v0 + x] = b
            if b > 0.0:
                h -= b * np.log(b)
        F -= c_var[i] * h
        for p in range(var_ptr[i], var_ptr[i + 1]):
            k = var_edges[p]
            a = edge_fac[k]
            F += c_edge[k] * (h - h_fac[a])
            f0 = fac_off[a]
            size = fac_off[a + 1] - f0
            st = stride[k]
            for x in range(ci):
                acc = 0.0
                for s in range(size):
                    if (s // st) % ci == x:
                        acc += fac_b[f0 + s]
                d = abs(acc - var_b[v0 + x])
                if d > cons:
                    cons = d
    return F, cons


# ---------------------------------------------------------------------------
# sum-product belief propagation; messages are vectors over x_i at m_off[k]

@njit(cache=True)
def _bp_var_to_fac(i, f2v, v2f, var_ptr, var_edges, card, m_off):
    ci = card[i]
    for p in range(var_ptr[i], var_ptr[i + 1]):
        k = var_edges[p]
        mx = -np.inf
        for x in range(ci):
            acc = 0.0
            for q in range(var_ptr[i], var_ptr[i + 1]):
                k2 = var_edges[q]
                if k2 != k:
                    acc += f2v[m_off[k2] + x]
            v2f[m_off[k] + x] = acc
            if acc > mx:
                mx = acc
        for x in range(ci):
            v2f[m_off[k] + x] -= mx


@njit(cache=True)
def _bp_fac_to_var(k, log_psi, v2f, f2v, scratch, edge_fac, edge_var, stride, card, fac_ptr,
                   fac_edges, fac_off, m_off):
    a = edge_fac[k]
    f0 = fac_off[a]
    size = fac_off[a + 1] - f0
    for s in range(size):
        t = log_psi[f0 + s]
        for p in range(fac_ptr[a], fac_ptr[a + 1]):
            k2 = fac_edges[p]
            if k2 != k:
                j = edge_var[k2]
                t += v2f[m_off[k2] + (s // stride[k2]) % card[j]]
        scratch[s] = t
    i = edge_var[k]
    ci = card[i]
    st = stride[k]
    top = -np.inf
    for x in range(ci):
        mx = -np.inf
        for s in range(size):
            if (s // st) % ci == x and scratch[s] > mx:
                mx = scratch[s]
        acc = 0.0
        for s in range(size):
            if (s // st) % ci == x:
                acc += np.exp(scratch[s] - mx)
        v = mx + np.log(acc)
        f2v[m_off[k] + x] = v
        if v > top:
            top = v
    for x in range(ci):
        f2v[m_off[k] + x] -= top


@njit(cache=True)
def bp_run(log_psi, f2v, v2f, scratch, asynchronous, max_iters, tol, var_ptr, var_edges,
           edge_fac, edge_var, stride, card, fac_ptr, fac_edges, fac_off, m_off):
    """Iterate until no factor-to-variable message moves by more than ``tol``."""
    n = var_ptr.size - 1
    K = edge_fac.size
    old = np.empty_like(f2v)
    for it in range(max_iters):
        old[:] = f2v
        if asynchronous:
            for i in range(n):
                for p in range(var_ptr[i], var_ptr[i + 1]):
                    _bp_fac_to_var(var_edges[p], log_psi, v2f, f2v, scratch, edge_fac, edge_var,
                                   stride, card, fac_ptr, fac_edges, fac_off, m_off)
                _bp_var_to_fac(i, f2v, v2f, var_ptr, var_edges, card, m_off)
        else:
            for i in range(n):
                _bp_var_to_fac(i, f2v, v2f, var_ptr, var_edges, card, m_off)
            for k in range(K):
                _bp_fac_to_var(k, log_psi, v2f, f2v, scratch, edge_fac, edge_var, stride, card,
                               fac_ptr, fac_edges, fac_off, m_off)
        delta = 0.0
        for q in range(f2v.size):
            d = abs(np.exp(f2v[q]) - np.exp(old[q]))
            if d > delta:
                delta = d
        if delta <= tol:
            for i in range(n):
                _bp_var_to_fac(i, f2v, v2f, var_ptr, var_edges, card, m_off)
            return True, it + 1
    for i in range(n):
        _bp_var_to_fac(i, f2v, v2f, var_ptr, var_edges, card, m_off)
    return False, max_iters
