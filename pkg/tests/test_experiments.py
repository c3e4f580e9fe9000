import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distcache.config import ConfigError, ExperimentSpec, SystemConfig, Topology
from distcache.experiments import (_fmt, aggregate, evaluate, expand, fail_phases, failed_spines, r_squared,
                                   run_suite, sort_rows, theory_workload, to_csv, worker_count)

TINY = ExperimentSpec(policies=("distcache", "nocache"), skews=(0.99,), seeds=(1, 2), horizon=3.0,
                      system=SystemConfig(topology=Topology(spines=2, racks=2, servers_per_rack=2),
                                          universe=2000, cache_per_node=10))


def test_fmt():
    assert _fmt(True) == "1" and _fmt(np.float64(0.5)) == "0.500000" and _fmt(3) == "3"


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=10, unique=True), st.floats(-5, 5), st.floats(-5, 5))
def test_r_squared_of_a_line(xs, a, b):
    x = np.array(xs)
    if np.ptp(x) < 1e-3 or abs(a) < 0.1:
        return
    assert r_squared(x, a * x + b) == pytest.approx(1.0, abs=1e-6)


def test_aggregate_mean_and_stderr():
    rows = [dict(skew=0.9, policy="nocache", seed=s, throughput=t, hit_ratio=0.0, config_hash=f"h{s}")
            for s, t in ((1, 1.0), (2, 3.0))]
    (r,) = aggregate(rows, "skew")
    assert r["mean"] == 2.0 and r["stderr"] == pytest.approx(1.0) and r["n"] == 2 and r["seeds"] == "1 2"


def test_policy_order_in_tables():
    rows = [{"x": 1, "policy": p} for p in ("distcache", "nocache", "replication", "partition")]
    assert [r["policy"] for r in sort_rows(rows)] == ["nocache", "partition", "replication", "distcache"]
    assert to_csv([]) == ""


def test_failure_helpers():
    assert fail_phases(4) == [0.125, 0.375, 0.625, 0.875]
    down = failed_spines(3, 16, 4)
    assert down == failed_spines(3, 16, 4) and len(set(down)) == 4 and max(down) < 16


def test_theory_workload_caps_objects():
    d = theory_workload(32, 111, 0.99, 0.8)
    assert d.rates.max() <= 0.5 + 1e-9
    assert d.total_rate == pytest.approx(0.8 * 32)


def test_expand_sizes():
    spec = ExperimentSpec(theory_seeds=5)
    assert len(expand(spec, "fig8a")) == 4 * 4 * 2
    assert len(expand(spec, "lemma3")) == 5
    assert len(expand(spec, "fig10")) == 2
    with pytest.raises(ConfigError):
        expand(spec, "fig11")


def _agg(rows):
    return {"fig8a": [dict(skew=s, policy=p, mean=m) for s, p, m in rows]}


def test_evaluate_fig8a():
    good = [(0.99, "nocache", 1), (0.99, "partition", 2), (0.99, "replication", 3), (0.99, "distcache", 3),
            (0.0, "nocache", 1), (0.0, "partition", 1), (0.0, "replication", 1.01), (0.0, "distcache", 1)]
    assert all(c.passed for c in evaluate("fig8a", _agg(good)))
    bad = [(s, p, 3.5 if p == "partition" and s == 0.99 else m) for s, p, m in good]
    assert not all(c.passed for c in evaluate("fig8a", _agg(bad)))


def test_worker_env(monkeypatch):
    monkeypatch.setenv("DISTCACHE_WORKERS", "3")
    assert worker_count() == 3 and worker_count(deterministic=True) == 1
    monkeypatch.setenv("DISTCACHE_WORKERS", "many")
    with pytest.raises(ConfigError):
        worker_count()


def test_csv_identical_across_workers(tmp_path):
    run_suite(TINY, "fig8a", tmp_path / "a", workers=1)
    run_suite(TINY, "fig8a", tmp_path / "b", workers=2)
    for name in ("fig8a.csv", "fig8a_runs.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
