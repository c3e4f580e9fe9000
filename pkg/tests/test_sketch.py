from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distcache.hashing import key_words, object_key
from distcache.ring import HashRing
from distcache.sketch import BloomFilter, CountMinSketch, HeavyHitterDetector, derive_seeds
from distcache.workload import TableSampler, zipf_probs

key_ids = st.lists(st.integers(0, 5000), max_size=400)


@given(key_ids, st.integers(0, 2**32))
def test_cm_never_underestimates(ids, seed):
    cms = CountMinSketch(derive_seeds(seed, 3), width=64)
    keys = [object_key(i) for i in ids]
    for k in keys:
        cms.add(k)
    for k, c in Counter(keys).items():
        assert cms.estimate(k) >= c


@given(key_ids)
def test_cm_batch_equals_single(ids):
    a = CountMinSketch(derive_seeds(1, 4), width=128)
    b = CountMinSketch(derive_seeds(1, 4), width=128)
    keys = [object_key(i) for i in ids]
    for k in keys:
        a.add(k)
    if keys:
        u, c = np.unique(np.array(ids), return_counts=True)
        lo, hi = key_words([object_key(int(i)) for i in u])
        b.add_many(lo, hi, c)
    assert np.array_equal(a.table, b.table)


def test_cm_saturates():
    cms = CountMinSketch(derive_seeds(2, 2), width=8)
    k = object_key(3)
    cms.add(k, 70_000)
    assert cms.estimate(k) == 65_535


@given(key_ids)
def test_bloom_no_false_negatives(ids):
    bf = BloomFilter(derive_seeds(5, 3), 1 << 12)
    keys = [object_key(i) for i in ids]
    for k in keys:
        bf.add(k)
    if keys:
        assert bf.contains_many(*key_words(keys)).all()


def test_hh_reports_once_per_epoch():
    hh = HeavyHitterDetector(0, report_threshold=3)
    k = object_key(42)
    for _ in range(10):
        hh.observe(k)
    assert list(hh.reported) == [k] and hh.reported[k] == 3
    hh.rotate()
    assert hh.reported == {} and hh.estimate(k) == 0
    assert hh.estimate(k, completed=True) == 10
    assert hh.top_k(1) == [(k, 10)]


def test_hh_epochs_hash_independently():
    hh = HeavyHitterDetector(7)
    t0 = hh.cms.seeds
    hh.rotate()
    assert hh.cms.seeds != t0
    with pytest.raises(ValueError):
        hh.top_k(0)


@pytest.mark.parametrize("seed", range(1, 21))
def test_hh_top10_overlap(seed):
    keys = np.empty(10**4, dtype=object)
    keys[:] = [object_key(i) for i in range(10**4)]
    ranks = TableSampler(zipf_probs(10**4, 0.99)).sample(np.random.default_rng(seed), 10**5)
    hh = HeavyHitterDetector(seed)
    hh.observe_many(list(keys[ranks]))
    hh.rotate()
    u, c = np.unique(ranks, return_counts=True)
    exact = [keys[u[i]] for i in np.lexsort((u, -c))[:10]]
    got = [k for k, _ in hh.top_k(10)]
    assert sum(a == b for a, b in zip(exact, got)) >= 9


@given(st.lists(st.integers(0, 63), min_size=1, max_size=12, unique=True), st.integers(0, 10**6))
def test_ring_moves_only_removed_keys(nodes, seed):
    ring = HashRing.build(nodes, seed)
    keys = [object_key(i) for i in range(200)]
    before = {k: ring.lookup(k) for k in keys}
    assert set(before.values()) <= set(nodes)
    if len(nodes) > 1:
        gone = nodes[0]
        ring.remove(gone)
        for k in keys:
            if before[k] != gone:
                assert ring.lookup(k) == before[k]
            else:
                assert ring.lookup(k) != gone
        ring.add(gone)
        assert {k: ring.lookup(k) for k in keys} == before
