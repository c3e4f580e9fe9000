"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed at the end of the session.
Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import time
from collections import Counter

import numpy as np
import pytest

from conftest import CRITERIA
from distcache.checks import expansion_agreement, oracle_agreement
from distcache.coherence import CoherenceHarness
from distcache.config import ExperimentSpec, SystemConfig, Topology
from distcache.experiments import run_suite, worker_count
from distcache.hashing import key_words, object_key
from distcache.sketch import CountMinSketch, HeavyHitterDetector, derive_seeds
from distcache.workload import TableSampler, zipf_probs

SPEC = ExperimentSpec()


@pytest.fixture(scope="module")
def out(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def record(n, ok, line):
    CRITERIA[n] = (bool(ok), line)
    print(f"{'PASS' if ok else 'FAIL'} [{n}] {line}")
    assert ok, line


def suite(name, out, budget):
    t0 = time.perf_counter()
    res = run_suite(SPEC, name, out, worker_count())
    dt = time.perf_counter() - t0
    detail = "; ".join(f"{c.name}: {c.detail}" for c in res.checks)
    return res.passed and dt < budget, f"{name} in {dt:.1f}s (< {budget}s): {detail}"


def test_c01_oracle_vs_cut_enumeration():
    r = oracle_agreement(500, seed=1)
    record(1, r.ok and r.seconds < 10,
           f"matching: {r.agree}/{r.trials} agree, {r.feasible} feasible, {r.bad_assignments} bad, {r.seconds:.2f}s")


def test_c02_expansion_vs_subsets():
    r = expansion_agreement(200, seed=1)
    record(2, r.ok and r.seconds < 30, f"expansion: {r.agree}/{r.trials} agree, {r.seconds:.2f}s")


def test_c03_feasibility_probe(out):
    record(3, *suite("lemma1", out, 60))


def test_c04_two_choice_stationarity(out):
    record(4, *suite("lemma2", out, 120))


def test_c05_single_hash_overload(out):
    record(5, *suite("lemma3", out, 120))


def test_c06_skew_sweep(out):
    record(6, *suite("fig8a", out, 180))


def test_c07_scale_out(out):
    record(7, *suite("fig8c", out, 300))


def test_c08_write_ratio_sweep(out):
    record(8, *suite("fig9b", out, 300))


def test_c09_spine_failures(out):
    record(9, *suite("fig10", out, 120))


def test_c10_coherence_under_loss():
    t0 = time.perf_counter()
    r = CoherenceHarness(seed=1, skew=0.9, write_ratio=0.2, drop=0.01, dup=0.01).run(100_000)
    dt = time.perf_counter() - t0
    record(10, r.stale_reads == 0 and r.regressions == 0 and dt < 60,
           f"{r.operations} ops, {r.writes} writes, {r.dropped} dropped, {r.duplicated} duplicated: "
           f"{r.stale_reads} stale, {r.regressions} regressions, {dt:.1f}s")


def test_c11_sketch_bounds():
    t0 = time.perf_counter()
    universe = 10**4
    keys = np.empty(universe, dtype=object)
    keys[:] = [object_key(i) for i in range(universe)]
    sampler = TableSampler(zipf_probs(universe, 0.99))
    # 10 epochs of 10^5 queries; every (key, epoch) estimate must cover the exact count
    rng = np.random.default_rng(11)
    under = 0
    for epoch in range(10):
        cms = CountMinSketch(derive_seeds(epoch, 4), width=1 << 12)
        ranks = sampler.sample(rng, 100_000)
        u, c = np.unique(ranks, return_counts=True)
        lo, hi = key_words(list(keys[u]))
        cms.add_many(*key_words(list(keys[ranks])))
        under += int((cms.estimate_many(lo, hi) < c).sum())
    overlaps = []
    for seed in range(1, 21):
        ranks = sampler.sample(np.random.default_rng(seed), 100_000)
        hh = HeavyHitterDetector(seed)
        hh.observe_many(list(keys[ranks]))
        hh.rotate()
        exact = [keys[r] for r, _ in sorted(Counter(ranks.tolist()).items(), key=lambda t: (-t[1], t[0]))[:10]]
        got = [k for k, _ in hh.top_k(10)]
        overlaps.append(sum(a == b for a, b in zip(exact, got)))
    dt = time.perf_counter() - t0
    record(11, under == 0 and min(overlaps) >= 9 and dt < 60,
           f"{under} underestimates over 10^6 queries; top-10 overlap min {min(overlaps)}/10 over 20 seeds, {dt:.1f}s")


def test_c12_byte_identical_reruns(tmp_path):
    tiny = ExperimentSpec(policies=("distcache", "nocache"), skews=(0.0, 0.99), seeds=(1, 2), horizon=3.0,
                          theory_seeds=20, fail_spines=4, fail_racks=4, fail_count=1, fail_phases=2,
                          system=SystemConfig(topology=Topology(spines=4, racks=4, servers_per_rack=2),
                                              universe=10**4, cache_per_node=20))
    diffs = []
    for name in ("oracle", "lemma1", "lemma3", "fig8a", "fig10"):
        files = {}
        for tag, workers in (("a", 1), ("b", 1), ("c", 2)):
            d = tmp_path / f"{name}-{tag}"
            run_suite(tiny, name, d, workers)
            files[tag] = {p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))}
        if not files["a"] or not (files["a"] == files["b"] == files["c"]):
            diffs.append(name)
    record(12, not diffs, "re-runs and 1 vs 2 workers byte-identical" if not diffs else f"differs: {diffs}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
