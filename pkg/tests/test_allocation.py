import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distcache.allocation import (Budgets, Command, HotSet, PartitionViolation, compute_partitions, diff_commands,
                                  refresh_hot_set, target_sets)
from distcache.cache_node import CacheNode
from distcache.coherence import insert_hot_object, StorageServer
from distcache.hashing import Partitioner, object_key
from distcache.routing import Policy
from distcache.workload import TableSampler, zipf_probs

P = Partitioner(21, 22, 6, 6)
KEYS = [object_key(i) for i in range(300)]
fail_sets = st.sets(st.integers(0, 5), max_size=5)


@given(fail_sets)
def test_cover_and_disjoint_after_failures(failed):
    pm = compute_partitions(P)
    for f in sorted(failed):
        pm = pm.fail(f)
    for k in KEYS:
        owners = [i for i in range(6) if pm.owns("upper", i, k)]
        assert len(owners) == 1
        assert owners[0] not in failed
        if P.h0(k) not in failed:
            assert owners[0] == P.h0(k)


@given(fail_sets)
def test_recover_restores_owners(failed):
    pm = compute_partitions(P)
    for f in sorted(failed):
        pm = pm.fail(f)
    for f in sorted(failed):
        pm = pm.recover(f)
    assert all(pm.owner("upper", k) == P.h0(k) for k in KEYS)
    assert pm.version == 1 + 2 * len(failed)


def test_partition_map_errors():
    pm = compute_partitions(Partitioner(1, 2, 2, 2))
    with pytest.raises(ValueError):
        pm.fail(2)
    with pytest.raises(ValueError):
        pm.fail(0).fail(1)
    with pytest.raises(ValueError):
        pm.owner("middle", KEYS[0])
    assert "failed" in pm.fail(1).dump()


def _scores(n=300):
    return {k: 1.0 / (i + 1) for i, k in enumerate(KEYS[:n])}


@pytest.mark.parametrize("policy", [Policy.POT, Policy.PARTITION_ONLY, Policy.REPLICATION, Policy.NOCACHE])
def test_target_sets_budgets(policy):
    pm = compute_partitions(P).fail(2)
    b = Budgets.per_node_only(10)
    upper, lower = target_sets(policy, _scores(), pm, b, 4)
    assert 2 not in upper
    assert all(len(s) <= 10 for s in upper.values())
    assert all(len(s) <= 10 for s in lower.values())
    for j, s in lower.items():
        assert all(P.h1(k) == j for k in s)
    if policy is Policy.POT:
        assert all(pm.owner("upper", k) == i for i, s in upper.items() for k in s)
    if policy is Policy.REPLICATION:
        assert all(s == set(KEYS[:10]) for s in upper.values())
    if policy in (Policy.NOCACHE, Policy.PARTITION_ONLY):
        assert not any(upper.values())


def test_layer_total_budget():
    b = Budgets(per_node=100)
    upper, _ = target_sets(Policy.POT, _scores(), compute_partitions(P), b, 4)
    assert sum(map(len, upper.values())) == b.upper(6) == 11


def test_diff_then_apply_reaches_target():
    hot = HotSet()
    hot.add("upper", 0, KEYS[1])
    upper, lower = {0: {KEYS[2]}, 1: set()}, {3: {KEYS[4]}}
    hot.apply(diff_commands(hot, upper, lower))
    assert hot.upper[0] == {KEYS[2]} and hot.lower[3] == {KEYS[4]}
    assert hot.upper_nodes(KEYS[1]) == () and hot.lower_node(KEYS[4]) == 3
    assert hot.drop_node("upper", 0) == [KEYS[2]]


def test_lower_layer_single_copy():
    hot = HotSet()
    hot.add("lower", 0, KEYS[0])
    with pytest.raises(PartitionViolation):
        hot.add("lower", 1, KEYS[0])


def test_refresh_rejects_foreign_keys():
    pm = compute_partitions(P)
    k = KEYS[0]
    wrong = (P.h0(k) + 1) % 6
    reports = {("upper", wrong): [(k, 5)]}
    # the owner is decided by the map, never by who reported the key
    cmds = refresh_hot_set(HotSet(), reports, pm, Policy.POT, Budgets.per_node_only(4), 2)
    assert Command("insert", "upper", P.h0(k), k) in cmds
    node = CacheNode(0)
    with pytest.raises(PartitionViolation):
        insert_hot_object(node, ("upper", wrong), k, StorageServer(lambda _: ()), 0.0,
                          owns=lambda key: pm.owns("upper", wrong, key))


def test_refresh_converges_to_popular_mass():
    p = Partitioner(31, 32, 4, 4)
    pm = compute_partitions(p)
    universe, per_node = 10**4, 10
    d = zipf_probs(universe, 0.99)
    keys = np.empty(universe, dtype=object)
    keys[:] = [object_key(i) for i in range(universe)]
    nodes = {("upper", i): CacheNode(i) for i in range(4)}
    nodes.update({("lower", j): CacheNode(4 + j) for j in range(4)})
    b = Budgets.per_node_only(per_node)
    hot = HotSet()
    rng = np.random.default_rng(5)
    sampler = TableSampler(d)
    h0 = {k: p.h0(k) for k in keys}
    h1 = {k: p.h1(k) for k in keys}
    for _ in range(5):
        for k in keys[sampler.sample(rng, 20_000)]:
            nodes[("upper", h0[k])].observe_passing(k)
            nodes[("lower", h1[k])].observe_passing(k)
        for n in nodes.values():
            n.tick_second()
        reports = {v: n.hh_top_k(per_node) for v, n in nodes.items()}
        hot.apply(refresh_hot_set(hot, reports, pm, Policy.POT, b, 1))
    exact_u, exact_l = target_sets(Policy.POT, {k: d.probs[i] for i, k in enumerate(keys)}, pm, b, 1)
    want = set().union(*exact_u.values(), *exact_l.values())
    have = set().union(*hot.upper.values(), *hot.lower.values())
    mass = {k: d.probs[i] for i, k in enumerate(keys)}
    assert sum(mass[k] for k in have & want) >= 0.9 * sum(mass[k] for k in want)
