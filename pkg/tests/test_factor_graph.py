import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convexbp.errors import (DuplicateVariableInScope, IsolatedVariable, MultiIntersection,
                             NonPositivePotential, ParseError)
from convexbp.factor_graph import (FactorGraph, build_graph, grid_edges, ising_grid,
                                   parse_model, random_graph, read_model, serialize_model,
                                   write_model)

from conftest import random_factor_graph


def test_smallest_graph():
    g = build_graph([2], [((0,), [1.0, 1.0])])
    assert g.num_variables == 1
    assert g.neighbors(0) == (0,)


def test_chain_intersection():
    g = build_graph([2, 2, 2], [((0, 1), np.ones((2, 2))), ((1, 2), np.ones((2, 2)))])
    assert set(g.scope(0)) & set(g.scope(1)) == {1}
    assert g.neighbors(1) == (0, 1)


def test_multi_intersection_rejected():
    with pytest.raises(MultiIntersection):
        build_graph([2] * 4, [((0, 1, 2), np.ones((2, 2, 2))), ((1, 2, 3), np.ones((2, 2, 2)))])


def test_duplicate_scope_rejected():
    with pytest.raises(DuplicateVariableInScope):
        build_graph([2], [((0, 0), np.ones((2, 2)))])


@pytest.mark.parametrize("bad", [0.0, -1.0, np.inf, np.nan])
def test_nonpositive_rejected(bad):
    with pytest.raises(NonPositivePotential):
        build_graph([2], [((0,), [1.0, bad])])


def test_isolated_rejected():
    with pytest.raises(IsolatedVariable):
        build_graph([2, 2], [((0,), [1.0, 2.0])])


def test_grid_counts():
    g = ising_grid(8, 1.0, 1.0, "mixed", 0)
    sizes = [len(f.scope) for f in g.factors]
    assert g.num_variables == 64
    assert sizes.count(1) == 64
    assert sizes.count(2) == 2 * 8 * 7
    assert len(grid_edges(8)) == 112


def test_grid_zero_interaction():
    g = ising_grid(3, 1.0, 0.0, "mixed", 1)
    for f in g.factors:
        if len(f.scope) == 2:
            assert np.all(f.table == 1.0)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_attractive_couplings_nonnegative(seed):
    g = ising_grid(3, 1.0, 2.0, "attractive", seed)
    for f in g.factors:
        if len(f.scope) == 2:
            # exp(theta x_i x_j): agreeing states carry exp(theta)
            assert f.table[0, 0] >= f.table[0, 1]


def test_ising_table_form():
    g = ising_grid(2, 1.0, 1.0, "mixed", 3)
    u = g.factors[0].table
    theta = np.log(u[1])
    assert np.allclose(u, np.exp(theta * np.array([-1.0, 1.0])))
    p = g.factors[4].table
    t = np.log(p[1, 1])
    assert np.allclose(p, np.exp(t * np.array([[1.0, -1.0], [-1.0, 1.0]])))


def test_random_graph_extremes():
    g0 = random_graph(10, 0.0, 1.0, 1.0, "mixed", 0)
    assert g0.num_factors == 10
    g1 = random_graph(10, 1.0, 1.0, 1.0, "mixed", 0)
    assert sum(len(f.scope) == 2 for f in g1.factors) == 45


def test_generators_deterministic():
    a = random_graph(10, 0.5, 1.0, 2.0, "mixed", 7)
    b = random_graph(10, 0.5, 1.0, 2.0, "mixed", 7)
    assert serialize_model(a) == serialize_model(b)
    assert serialize_model(ising_grid(4, 1, 2, "mixed", 9)) == serialize_model(
        ising_grid(4, 1, 2, "mixed", 9))


@given(st.integers(0, 10 ** 6))
@settings(max_examples=40, deadline=None)
def test_energy_potential_duality(seed):
    g = random_factor_graph(seed)
    for f in g.factors:
        assert np.isclose(np.exp(-f.energy).sum(), f.table.sum(), rtol=1e-14, atol=0)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=40, deadline=None)
def test_round_trip(seed):
    g = random_factor_graph(seed)
    h = parse_model(serialize_model(g))
    assert h.cardinalities == g.cardinalities
    for f, e in zip(g.factors, h.factors):
        assert f.scope == e.scope
        assert np.array_equal(f.table, e.table)


def test_file_round_trip(tmp_path):
    g = ising_grid(3, 1.0, 1.0, "attractive", 5)
    path = tmp_path / "m.uai"
    write_model(g, path)
    assert serialize_model(read_model(path)) == serialize_model(g)


def test_table_order_last_fastest():
    g = parse_model("MARKOV\n2\n2 3\n1\n2 0 1\n6\n1 2 3 4 5 6\n")
    assert g.factors[0].table[1, 0] == 4.0
    assert g.factors[0].table[0, 2] == 3.0


@pytest.mark.parametrize("text", [
    "MARKOW\n1\n2\n1\n1 0\n2\n1 1\n",
    "MARKOV\nx\n",
    "MARKOV\n1\n2\n1\n1 0\n3\n1 1 1\n",
    "MARKOV\n1\n2\n1\n1 0\n2\n1\n",
    "MARKOV\n1\n2\n1\n1 0\n2\n1 1 7\n",
])
def test_malformed(text):
    with pytest.raises(ParseError):
        parse_model(text)


def test_parse_error_has_line():
    with pytest.raises(ParseError) as info:
        parse_model("MARKOV\n1\n2\n1\n1 0\n2\n1 abc\n")
    assert "7" in str(info.value)


def test_parse_validation_errors():
    with pytest.raises(NonPositivePotential):
        parse_model("MARKOV\n1\n2\n1\n1 0\n2\n1 0\n")


def test_graph_is_factorgraph():
    assert isinstance(ising_grid(2, 0.1, 0.1, "mixed", 0), FactorGraph)
