"""Discrete factor graphs: data model, validation, generators and file I/O.

Tables are stored as numpy arrays shaped by the cardinalities of the factor
scope, in C (row-major) order, so the last scope variable varies fastest.

Ising models use the state encoding ``0 <-> -1`` and ``1 <-> +1``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateVariableInScope,
    GraphError,
    IsolatedVariable,
    MultiIntersection,
    NonPositivePotential,
    ParseError,
)

__all__ = [
    "Variable",
    "Factor",
    "FactorGraph",
    "build_graph",
    "ising_grid",
    "random_graph",
    "parse_model",
    "serialize_model",
    "read_model",
    "write_model",
    "ISING_STATES",
]

ISING_STATES = (-1.0, 1.0)


@dataclass(frozen=True)
class Variable:
    id: int
    cardinality: int


@dataclass(frozen=True, eq=False)
class Factor:
    id: int
    scope: tuple[int, ...]
    table: np.ndarray = field(repr=False)

    @property
    def energy(self) -> np.ndarray:
        """Energy table ``-ln psi``."""
        return -np.log(self.table)

    @property
    def size(self) -> int:
        return self.table.size


class FactorGraph:
    """Immutable bipartite variable/factor structure with positive tables.

    Use :func:`build_graph` (or the generators) to construct one; the
    constructor performs the full validation.
    """

    def __init__(self, cardinalities: Sequence[int], scopes: Sequence[Sequence[int]],
                 tables: Sequence[Iterable[float]]):
        cards = tuple(int(c) for c in cardinalities)
        if len(scopes) != len(tables):
            raise GraphError("number of scopes and tables differ")
        for v, c in enumerate(cards):
            if c < 2:
                raise GraphError(f"variable {v} has cardinality {c} < 2")
        n = len(cards)

        factors = []
        for a, (scope, table) in enumerate(zip(scopes, tables)):
            scope = tuple(int(v) for v in scope)
            if not scope:
                raise GraphError(f"factor {a} has an empty scope")
            if len(set(scope)) != len(scope):
                raise DuplicateVariableInScope(f"factor {a} repeats a variable in scope {scope}")
            for v in scope:
                if not 0 <= v < n:
                    raise GraphError(f"factor {a} references unknown variable {v}")
            shape = tuple(cards[v] for v in scope)
            arr = np.array(table, dtype=float).reshape(-1)
            if arr.size != int(np.prod(shape)):
                raise GraphError(
                    f"factor {a} table has {arr.size} entries, scope needs {int(np.prod(shape))}")
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise NonPositivePotential(f"factor {a} has a non-positive or non-finite entry")
            arr = arr.reshape(shape)
            arr.setflags(write=False)
            factors.append(Factor(a, scope, arr))

        var_factors: list[list[int]] = [[] for _ in range(n)]
        for f in factors:
            for v in f.scope:
                var_factors[v].append(f.id)
        for v, nb in enumerate(var_factors):
            if not nb:
                raise IsolatedVariable(f"variable {v} appears in no factor")

        # every pair of factors may share at most one variable
        seen: dict[tuple[int, int], int] = {}
        for f in factors:
            for u, w in itertools.combinations(sorted(f.scope), 2):
                other = seen.get((u, w))
                if other is not None:
                    raise MultiIntersection(
                        f"factors {other} and {f.id} share variables {u} and {w}")
                seen[(u, w)] = f.id

        self.cardinalities = cards
        self.factors = tuple(factors)
        self.variable_factors = tuple(tuple(nb) for nb in var_factors)
        # incidences in variable-major order; edge id -> (variable, factor)
        self.edges = tuple((v, a) for v in range(n) for a in self.variable_factors[v])
        self._edge_index = {e: k for k, e in enumerate(self.edges)}

    @property
    def variables(self) -> tuple[Variable, ...]:
        return tuple(Variable(i, c) for i, c in enumerate(self.cardinalities))

    @property
    def num_variables(self) -> int:
        return len(self.cardinalities)

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    def scope(self, a: int) -> tuple[int, ...]:
        return self.factors[a].scope

    def neighbors(self, i: int) -> tuple[int, ...]:
        """Factor ids touching variable ``i``."""
        return self.variable_factors[i]

    def degree(self, i: int) -> int:
        return len(self.variable_factors[i])

    def edge_id(self, i: int, a: int) -> int:
        return self._edge_index[(i, a)]

    def axis(self, a: int, i: int) -> int:
        """Position of variable ``i`` inside the scope of factor ``a``."""
        return self.factors[a].scope.index(i)

    def is_pairwise(self) -> bool:
        return all(len(f.scope) <= 2 for f in self.factors)

    def structure_key(self) -> tuple:
        """Hashable description of the structure (cards and scopes), ignoring tables."""
        return self.cardinalities, tuple(f.scope for f in self.factors)

    def __eq__(self, other):
        if not isinstance(other, FactorGraph):
            return NotImplemented
        return self.structure_key() == other.structure_key() and all(
            np.array_equal(f.table, g.table) for f, g in zip(self.factors, other.factors))

    __hash__ = None

    def __repr__(self):
        return f"FactorGraph(variables={self.num_variables}, factors={self.num_factors})"


def build_graph(variables: Sequence[Variable | int], factors: Sequence) -> FactorGraph:
    """Validate and assemble a factor graph.

    ``variables`` holds :class:`Variable` records (ids must be ``0..n-1`` in
    order) or plain cardinalities. ``factors`` holds :class:`Factor` records or
    ``(scope, table)`` pairs.
    """
    cards = []
    for k, v in enumerate(variables):
        if isinstance(v, Variable):
            if v.id != k:
                raise GraphError(f"variable ids must be contiguous, got {v.id} at position {k}")
            cards.append(v.cardinality)
        else:
            cards.append(int(v))
    scopes, tables = [], []
    for f in factors:
        if isinstance(f, Factor):
            scopes.append(f.scope)
            tables.append(f.table)
        else:
            scope, table = f
            scopes.append(scope)
            tables.append(table)
    return FactorGraph(cards, scopes, tables)


def _ising_tables(theta_field, edges, theta_pair):
    s = np.array(ISING_STATES)
    scopes: list[tuple[int, ...]] = [(i,) for i in range(len(theta_field))]
    tables = [np.exp(t * s) for t in theta_field]
    for (i, j), t in zip(edges, theta_pair):
        scopes.append((i, j))
        tables.append(np.exp(t * np.outer(s, s)))
    return scopes, tables


def _coupling(rng, d_o, mode, size):
    if mode == "mixed":
        return rng.uniform(-d_o, d_o, size)
    if mode == "attractive":
        return rng.uniform(0.0, d_o, size)
    raise ValueError(f"mode must be 'mixed' or 'attractive', got {mode!r}")


def grid_edges(n: int) -> list[tuple[int, int]]:
    """Edges of the ``n x n`` grid; variable ``r*n + c``, right edge before down edge."""
    edges = []
    for r in range(n):
        for c in range(n):
            v = r * n + c
            if c + 1 < n:
                edges.append((v, v + 1))
            if r + 1 < n:
                edges.append((v, v + n))
    return edges


def ising_grid(n: int, d_f: float, d_o: float, mode: str = "mixed", seed=None) -> FactorGraph:
    """Binary Ising model on an ``n x n`` grid.

    Singleton factors ``exp(theta_i x_i)`` come first (one per variable),
    followed by pairwise factors ``exp(theta_ij x_i x_j)`` in :func:`grid_edges`
    order. Fields are drawn from ``U[-d_f, d_f]`` and couplings from
    ``U[-d_o, d_o]`` (mixed) or ``U[0, d_o]`` (attractive), in that order, from
    ``numpy.random.default_rng(seed)`` (PCG64).
    """
    if n < 2:
        raise ValueError("grid side must be at least 2")
    if d_f < 0 or d_o < 0:
        raise ValueError("field and interaction bounds must be non-negative")
    rng = np.random.default_rng(seed)
    edges = grid_edges(n)
    theta_field = rng.uniform(-d_f, d_f, n * n)
    theta_pair = _coupling(rng, d_o, mode, len(edges))
    scopes, tables = _ising_tables(theta_field, edges, theta_pair)
    return FactorGraph([2] * (n * n), scopes, tables)


def random_graph(n: int, p: float, d_f: float, d_o: float, mode: str = "mixed",
                 seed=None) -> FactorGraph:
    """Ising potentials on an Erdos-Renyi ``G(n, p)`` edge set.

    Edge indicators are drawn first (pairs ``i < j`` in lexicographic order),
    then fields, then couplings for the present edges. Every variable carries a
    singleton factor, so isolated vertices are still valid.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("edge probability must lie in [0, 1]")
    if n < 1:
        raise ValueError("need at least one vertex")
    rng = np.random.default_rng(seed)
    pairs = list(itertools.combinations(range(n), 2))
    present = rng.random(len(pairs)) < p
    edges = [e for e, keep in zip(pairs, present) if keep]
    theta_field = rng.uniform(-d_f, d_f, n)
    theta_pair = _coupling(rng, d_o, mode, len(edges))
    scopes, tables = _ising_tables(theta_field, edges, theta_pair)
    return FactorGraph([2] * n, scopes, tables)


# ---------------------------------------------------------------------------
# text format

def serialize_model(graph: FactorGraph) -> str:
    lines = ["MARKOV", str(graph.num_variables),
             " ".join(str(c) for c in graph.cardinalities), str(graph.num_factors)]
    for f in graph.factors:
        lines.append(" ".join(str(x) for x in (len(f.scope),) + f.scope))
    for f in graph.factors:
        lines.append("")
        lines.append(str(f.size))
        lines.append(" ".join(repr(float(x)) for x in f.table.reshape(-1)))
    return "\n".join(lines) + "\n"


class _Tokens:
    """Whitespace tokenizer that remembers line numbers."""

    def __init__(self, text: str):
        self._toks = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            for tok in line.split():
                self._toks.append((tok, lineno))
        self._pos = 0

    def next(self, what: str) -> tuple[str, int]:
        if self._pos >= len(self._toks):
            last = self._toks[-1][1] if self._toks else None
            raise ParseError(f"unexpected end of file while reading {what}", last)
        tok = self._toks[self._pos]
        self._pos += 1
        return tok

    def int(self, what: str) -> int:
        tok, line = self.next(what)
        try:
            return int(tok)
        except ValueError:
            raise ParseError(f"expected integer for {what}, got {tok!r}", line) from None

    def float(self, what: str) -> float:
        tok, line = self.next(what)
        try:
            return float(tok)
        except ValueError:
            raise ParseError(f"expected real for {what}, got {tok!r}", line) from None

    def peek_line(self) -> int | None:
        return self._toks[self._pos][1] if self._pos < len(self._toks) else None

    def done(self) -> bool:
        return self._pos >= len(self._toks)


def parse_model(text: str) -> FactorGraph:
    toks = _Tokens(text)
    head, line = toks.next("header")
    if head != "MARKOV":
        raise ParseError(f"expected header 'MARKOV', got {head!r}", line)
    n = toks.int("variable count")
    if n < 1:
        raise ParseError("variable count must be positive", toks.peek_line())
    cards = [toks.int("cardinality") for _ in range(n)]
    m = toks.int("factor count")
    if m < 0:
        raise ParseError("factor count must be non-negative", toks.peek_line())
    scopes = []
    for a in range(m):
        k = toks.int(f"scope size of factor {a}")
        scopes.append([toks.int(f"scope of factor {a}") for _ in range(k)])
    tables = []
    for a in range(m):
        line = toks.peek_line()
        count = toks.int(f"entry count of factor {a}")
        expected = int(np.prod([cards[v] for v in scopes[a]])) if all(
            0 <= v < n for v in scopes[a]) else None
        if expected is not None and count != expected:
            raise ParseError(f"factor {a} declares {count} entries, scope needs {expected}", line)
        tables.append([toks.float(f"table entry of factor {a}") for _ in range(count)])
    if not toks.done():
        raise ParseError("trailing tokens after the last table", toks.peek_line())
    return FactorGraph(cards, scopes, tables)


def read_model(path) -> FactorGraph:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read())


def write_model(graph: FactorGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_model(graph))
