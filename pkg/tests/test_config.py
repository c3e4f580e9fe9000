import pytest
from hypothesis import given
from hypothesis import strategies as st

from distcache.config import ConfigError, ExperimentSpec, SystemConfig, Topology, config_hash, parse_seeds, parse_spec

GOOD = """
[experiment]
name = small
policies = distcache, nocache
skews = 0.9, 0.99
seeds = 1..3, 7
horizon = 5

[topology]
spines = 4
racks = 4
servers_per_rack = 2

[system]
cache_per_node = 20
seed = 9
"""


def test_parse_good():
    s = parse_spec(GOOD)
    assert s.policies == ("distcache", "nocache")
    assert s.seeds == (1, 2, 3, 7)
    assert s.system.topology.spines == 4 and s.system.cache_per_node == 20
    assert s.horizon == 5.0 and s.skews == (0.9, 0.99)


@pytest.mark.parametrize("text,line", [
    ("[experiment]\nhorizon = -1\n", 2),
    ("[experiment]\n\npolicies = distcache, lru\n", 3),
    ("[experiment]\nbogus = 1\n", 2),
    ("[system]\nseed = x\n", 2),
    ("[experiment]\nfail_count = 99\n", 2),
])
def test_errors_name_the_line(text, line):
    with pytest.raises(ConfigError) as e:
        parse_spec(text)
    assert e.value.line == line
    assert f"line {line}" in str(e.value)


def test_unknown_section():
    with pytest.raises(ConfigError):
        parse_spec("[network]\nx = 1\n")


@given(st.lists(st.integers(-50, 50), min_size=1, max_size=10))
def test_seed_list_roundtrip(xs):
    assert parse_seeds(",".join(map(str, xs))) == tuple(xs)


@given(st.integers(-20, 20), st.integers(0, 20))
def test_seed_range(a, n):
    assert parse_seeds(f"{a}..{a + n}") == tuple(range(a, a + n + 1))


@pytest.mark.parametrize("bad", ["", "5..1", "a"])
def test_seed_errors(bad):
    with pytest.raises(ValueError):
        parse_seeds(bad)


def test_validation():
    with pytest.raises(ConfigError):
        Topology(spines=0)
    with pytest.raises(ConfigError):
        SystemConfig(write_ratio=2)
    with pytest.raises(ConfigError):
        ExperimentSpec(seeds=())


def test_derived_seeds_and_hash():
    a, b = SystemConfig(seed=1), SystemConfig(seed=2)
    assert a.hash_seeds != b.hash_seeds
    assert a.hash_seeds == SystemConfig(seed=1).hash_seeds
    assert config_hash(a) == config_hash(SystemConfig(seed=1)) != config_hash(b)
    c = a.with_(spines=3, skew=0.5)
    assert c.topology.spines == 3 and c.skew == 0.5 and c.topology.racks == a.topology.racks
    assert SystemConfig().hot_objects == 17  # ceil(8 ln 8)
