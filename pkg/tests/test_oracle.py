import random
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from distcache.checks import (cut_enumeration_feasible, cut_enumeration_maxflow, exact_assignment_check,
                              expansion_agreement, oracle_agreement, random_graph, random_instance)
from distcache.hashing import graph_from_pairs, object_key
from distcache.oracle import (InstanceFormatError, MatchingInstance, brute_force_expansion, check_expansion,
                              check_size_warning, dump_instance, lemma_instance, parse_instance, solve_matching,
                              traffic_intensity, verify_assignment)

DATA = Path(__file__).resolve().parents[1] / "data"


@st.composite
def instances(draw, max_objects=8, max_side=4):
    m0 = draw(st.integers(1, max_side))
    m1 = draw(st.integers(1, max_side))
    k = draw(st.integers(0, max_objects))
    pairs = draw(st.lists(st.tuples(st.integers(0, m0 - 1), st.integers(0, m1 - 1)), min_size=k, max_size=k))
    rates = draw(st.lists(st.integers(0, 4), min_size=k, max_size=k))
    cap = draw(st.integers(1, 4))
    return lemma_instance(pairs, rates, m0, m1, cap)


@given(instances())
def test_feasibility_matches_cut_enumeration(inst):
    a = solve_matching(inst)
    assert a.feasible == cut_enumeration_feasible(inst)
    assert a.flow == pytest.approx(cut_enumeration_maxflow(inst))


@given(instances())
def test_assignment_satisfies_constraints(inst):
    a = solve_matching(inst)
    if a.feasible:
        assert verify_assignment(inst, a) == []
        assert exact_assignment_check(inst, a)


@given(instances())
def test_cut_is_violated(inst):
    a = solve_matching(inst)
    if not a.feasible:
        g = inst.graph
        s = a.cut_objects
        rate = sum(r for o, r in zip(g.left, inst.rates) if o in s)
        nbr = {v for o in s for v in g.nodes_of(o)}
        assert rate > sum(inst.capacity_of(v) for v in nbr)


@given(instances(max_side=3))
def test_feasible_means_intensity_at_most_one(inst):
    # a feasible matching serves every subset's own arrivals inside it
    if solve_matching(inst).feasible:
        assert traffic_intensity(inst).rho_max <= 1 + 1e-9


@given(instances(max_side=3))
def test_sampled_intensity_below_exhaustive(inst):
    ex = traffic_intensity(inst).rho_max
    sm = traffic_intensity(inst, mode="sampled", samples=64, seed=1).rho_max
    assert sm <= ex + 1e-12


@given(st.integers(0, 10**6))
def test_expansion_matches_brute_force(seed):
    g = random_graph(random.Random(seed))
    ok, witness = check_expansion(g)
    ref, _ = brute_force_expansion(g)
    assert ok == ref
    if not ok:
        assert len({v for o in witness for v in g.nodes_of(o)}) < len(witness)


@given(instances())
def test_dump_parse_roundtrip(inst):
    back = parse_instance(dump_instance(inst))
    assert back.rates == inst.rates
    assert solve_matching(back).feasible == solve_matching(inst).feasible


def test_example_instance_saturates_every_node():
    inst = parse_instance((DATA / "two_layer_example.txt").read_text())
    a = solve_matching(inst)
    assert a.feasible and a.flow == 6
    rho = traffic_intensity(inst)
    assert rho.rho_max == pytest.approx(1.0)
    for v in inst.graph.right:
        assert a.node_load(v) == pytest.approx(1.0)


def test_overloaded_pair_cut():
    inst = parse_instance((DATA / "overloaded_pair.txt").read_text())
    a = solve_matching(inst)
    assert not a.feasible
    assert a.cut_objects == frozenset(object_key(i) for i in range(3))
    assert traffic_intensity(inst).rho_max == pytest.approx(1.5)


def test_empty_instance():
    inst = lemma_instance([], [], 2, 2, 1.0)
    assert solve_matching(inst).feasible
    assert traffic_intensity(inst).rho_max == 0.0


def test_fractional_split():
    # one object of rate 2 over two unit nodes must split 1/1
    inst = lemma_instance([(0, 0)], [2.0], 1, 1, 1.0)
    a = solve_matching(inst)
    assert a.feasible
    assert sorted(a.weights.values()) == [1.0, 1.0]


def test_per_node_capacity_mapping():
    g = graph_from_pairs([(0, 0), (0, 0)], 1, 1)
    caps = {("upper", 0): 3.0, ("lower", 0): 0.5}
    assert solve_matching(MatchingInstance(g, (1.5, 2.0), caps)).feasible
    assert not solve_matching(MatchingInstance(g, (1.5, 2.1), caps)).feasible


@pytest.mark.parametrize("text,line", [
    ("", 1),
    ("2 2\n", 1),
    ("2 2 1 1\n0 0 5 1\n", 2),
    ("2 2 2 1\n0 0 0 1\n0 1 1 1\n", 3),
    ("2 2 1 1\n0 0 0 -1\n", 2),
    ("2 2 2 1\n0 0 0 1\n", 2),
    ("# c\n2 2 1 x\n", 2),
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(InstanceFormatError) as e:
        parse_instance(text)
    assert e.value.line == line


def test_instance_validation():
    g = graph_from_pairs([(0, 0)], 1, 1)
    with pytest.raises(ValueError):
        MatchingInstance(g, (1.0, 2.0), 1.0)
    with pytest.raises(ValueError):
        MatchingInstance(g, (-1.0,), 1.0)
    with pytest.raises(ValueError):
        MatchingInstance(g, (1.0,), 0.0)


def test_size_warning():
    with pytest.warns(UserWarning):
        check_size_warning(10**4, 4)


def test_exhaustive_limit():
    inst = lemma_instance([(0, 0)], [1.0], 13, 13, 1.0)
    with pytest.raises(ValueError):
        traffic_intensity(inst)
    assert traffic_intensity(inst, mode="sampled", samples=8).rho_max >= 1 / 26


def test_reference_checks_smoke():
    assert oracle_agreement(50, seed=3).ok
    assert expansion_agreement(20, seed=3).ok
    inst = random_instance(random.Random(0))
    assert cut_enumeration_maxflow(inst) <= inst.total_rate
