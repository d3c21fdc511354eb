import itertools

import numpy as np
import pytest

from convexbp.factor_graph import build_graph


def random_tree(seed, n=None, max_n=12, unaries=True):
    """Random labelled tree with positive pairwise tables and optional unaries."""
    rng = np.random.default_rng(seed)
    if n is None:
        n = int(rng.integers(2, max_n + 1))
    factors = []
    if unaries:
        factors += [((i,), rng.uniform(0.2, 3.0, 2)) for i in range(n)]
    for v in range(1, n):
        u = int(rng.integers(0, v))
        factors.append(((u, v), rng.uniform(0.1, 4.0, (2, 2))))
    return build_graph([2] * n, factors)


def pairwise_graph(edges, n=None, tables=None, unary=None):
    """Binary pairwise graph; ``tables`` default to all-ones."""
    n = n if n is not None else 1 + max(max(e) for e in edges)
    factors = []
    if unary is not None:
        factors += [((i,), unary[i]) for i in range(n)]
    for k, e in enumerate(edges):
        t = np.ones((2, 2)) if tables is None else tables[k]
        factors.append((e, t))
    return build_graph([2] * n, factors)


def triangle():
    return pairwise_graph([(0, 1), (1, 2), (0, 2)])


def complete_graph(n):
    return pairwise_graph(list(itertools.combinations(range(n), 2)), n=n)


def random_factor_graph(seed, max_vars=6):
    """Small graph with mixed cardinalities and factor arities (single-intersection safe)."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, max_vars + 1))
    cards = [int(c) for c in rng.integers(2, 4, n)]
    factors = [((i,), rng.uniform(0.2, 3.0, cards[i])) for i in range(n)]
    used = set()
    for _ in range(int(rng.integers(1, 2 * n))):
        k = 3 if n >= 3 and rng.random() < 0.25 else 2
        scope = tuple(int(v) for v in rng.choice(n, size=k, replace=False))
        pairs = {tuple(sorted(p)) for p in itertools.combinations(scope, 2)}
        if pairs & used:
            continue
        used |= pairs
        shape = tuple(cards[v] for v in scope)
        factors.append((scope, rng.uniform(0.1, 4.0, shape)))
    return build_graph(cards, factors)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA = {}


def record_criterion(number, passed, detail):
    """Store one acceptance line; printed in the terminal summary."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
