"""Configuration objects and the INI-style experiment file."""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .hashing import MASK64, hash64


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line else ""
        what = f"[{key}] " if key else ""
        super().__init__(f"{where}{what}{msg}")
        self.line, self.key = line, key


@dataclass(frozen=True)
class Topology:
    spines: int = 8
    racks: int = 8
    servers_per_rack: int = 8
    server_rate: float = 20.0  # T, queries/s per storage server; small so desk runs stay short
    cache_ratio: float = 8.0  # cache node rate = cache_ratio * T
    client_racks: int | None = None
    bypass_upper_on_lower_hit: bool = False

    def __post_init__(self):
        for name in ("spines", "racks", "servers_per_rack"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.server_rate <= 0 or self.cache_ratio <= 0:
            raise ConfigError("rates must be > 0")
        if self.client_racks is not None and self.client_racks < 1:
            raise ConfigError("client_racks must be >= 1")

    @property
    def cache_rate(self) -> float:
        return self.server_rate * self.cache_ratio

    @property
    def servers(self) -> int:
        return self.racks * self.servers_per_rack

    @property
    def clients(self) -> int:
        return self.client_racks or self.racks


@dataclass(frozen=True)
class SystemConfig:
    """Everything a run depends on. Seeds for every module derive from ``seed``."""

    topology: Topology = field(default_factory=Topology)
    universe: int = 10**6
    skew: float = 0.99
    k: int | None = None  # hot objects for theory probes; default ceil(m ln m)
    utilization: float = 0.8  # R / (m * cache_rate)
    alphas: tuple = (0.8,)
    epsilon: float = 0.0
    beta: float = 3.0
    theory_probe: bool = False
    cache_per_node: int = 100
    write_ratio: float = 0.0
    seed: int = 1

    def __post_init__(self):
        if self.universe < 1:
            raise ConfigError("universe must be >= 1")
        if self.skew < 0:
            raise ConfigError("skew must be >= 0")
        if not 0 <= self.write_ratio <= 1:
            raise ConfigError("write_ratio must be in [0, 1]")
        if self.cache_per_node < 0:
            raise ConfigError("cache_per_node must be >= 0")

    @property
    def m(self) -> int:
        return self.topology.spines

    @property
    def hot_objects(self) -> int:
        m = self.m
        return self.k if self.k is not None else max(1, math.ceil(m * math.log(m)))

    @property
    def total_rate(self) -> float:
        return self.utilization * self.m * self.topology.cache_rate

    def derived_seed(self, purpose: str) -> int:
        return hash64((self.seed & MASK64).to_bytes(8, "little") + purpose.encode().ljust(8, b"\0")[:8], 0xD15C)

    @property
    def hash_seeds(self) -> tuple[int, int]:
        s0, s1 = self.derived_seed("h0"), self.derived_seed("h1")
        return (s0, s1) if s0 != s1 else (s0, s1 ^ 1)

    def with_(self, **kw) -> "SystemConfig":
        topo = {k: kw.pop(k) for k in list(kw) if k in Topology.__dataclass_fields__}
        cfg = replace(self, **kw)
        return replace(cfg, topology=replace(cfg.topology, **topo)) if topo else cfg


def config_hash(obj) -> str:
    """Short stable digest of a config dataclass, recorded in every CSV row."""
    blob = json.dumps(asdict(obj), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# ---- experiment file -----------------------------------------------------------------------

SUITES = ("fig8a", "fig8b", "fig8c", "fig9a", "fig9b", "fig10", "lemma1", "lemma2", "lemma3", "oracle")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "default"
    policies: tuple = ("distcache", "replication", "partition", "nocache")
    skews: tuple = (0.0, 0.9, 0.95, 0.99)
    cache_sizes: tuple = (10, 50, 100, 200)
    write_ratios: tuple = (0.0, 0.02, 0.05, 0.1, 0.2, 0.5)
    rack_counts: tuple = (2, 4, 6, 8)
    seeds: tuple = (1, 2)
    horizon: float = 10.0
    out: str = "results"
    system: SystemConfig = field(default_factory=SystemConfig)
    loss_target: float = 0.01
    theory_seeds: int = 100
    theory_m: int = 32
    fail_spines: int = 16
    fail_racks: int = 16
    fail_count: int = 4
    fail_phases: int = 4

    def __post_init__(self):
        for axis in ("policies", "skews", "cache_sizes", "write_ratios", "rack_counts", "seeds"):
            if len(getattr(self, axis)) == 0:
                raise ConfigError(f"{axis} must not be empty", key=axis)
        if self.horizon <= 0:
            raise ConfigError("horizon must be > 0", key="horizon")
        if not 0 < self.fail_count < self.fail_spines:
            raise ConfigError("fail_count must be in [1, fail_spines)", key="fail_count")
        if self.fail_phases < 1:
            raise ConfigError("fail_phases must be >= 1", key="fail_phases")
        if self.theory_seeds < 1 or self.theory_m < 2:
            raise ConfigError("theory probes need >= 1 seed and m >= 2")


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"1..5"``, ``"1,2,7"`` or a mix like ``"1..3, 9"``."""
    out: list[int] = []
    for part in re.split(r"[,\s]+", text.strip()):
        if not part:
            continue
        m = re.fullmatch(r"(-?\d+)\.\.(-?\d+)", part)
        if m:
            a, b = int(m.group(1)), int(m.group(2))
            if b < a:
                raise ValueError(f"empty seed range {part}")
            out.extend(range(a, b + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("no seeds given")
    return tuple(out)


def _key_lines(text: str) -> dict:
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
        elif "=" in s and not s.startswith(("#", ";")):
            lines[(section, s.split("=", 1)[0].strip().lower())] = no
    return lines


_SECTIONS = {
    "experiment": {"name", "policies", "skews", "cache_sizes", "write_ratios", "rack_counts", "seeds", "horizon",
                   "out", "loss_target", "theory_seeds", "theory_m", "fail_spines", "fail_racks", "fail_count", "fail_phases"},
    "topology": {f.name for f in fields(Topology)},
    "system": {f.name for f in fields(SystemConfig)} - {"topology"},
}


def parse_spec(text: str) -> ExperimentSpec:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e).splitlines()[0], getattr(e, "lineno", None)) from None
    where = _key_lines(text)

    def fail(section, key, msg):
        raise ConfigError(msg, where.get((section, key)), f"{section}.{key}")

    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in _SECTIONS[section]:
                fail(section, key, "unknown field")

    def conv(section, key, fn, default):
        if not cp.has_option(section, key):
            return default
        raw = cp.get(section, key)
        try:
            return fn(raw)
        except (ValueError, ConfigError) as e:
            fail(section, key, f"bad value {raw!r}: {e}")

    def floats(s):
        return tuple(float(x) for x in re.split(r"[,\s]+", s.strip()) if x)

    def ints(s):
        return tuple(int(x) for x in re.split(r"[,\s]+", s.strip()) if x)

    def words(s):
        return tuple(x.strip().lower() for x in s.split(",") if x.strip())

    def boolean(s):
        v = s.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError("expected a boolean")

    topo_kw = {}
    topo_casts = {"spines": int, "racks": int, "servers_per_rack": int, "server_rate": float,
                  "cache_ratio": float, "client_racks": int, "bypass_upper_on_lower_hit": boolean}
    for key, fn in topo_casts.items():
        v = conv("topology", key, fn, None)
        if v is not None:
            topo_kw[key] = v
    sys_kw = {}
    casts = {"universe": int, "skew": float, "k": int, "utilization": float, "alphas": floats, "epsilon": float,
             "beta": float, "theory_probe": boolean, "cache_per_node": int, "write_ratio": float, "seed": int}
    for key, fn in casts.items():
        v = conv("system", key, fn, None)
        if v is not None:
            sys_kw[key] = v
    try:
        topo = Topology(**topo_kw)
        system = SystemConfig(topology=topo, **sys_kw)
    except ConfigError as e:
        raise ConfigError(str(e)) from None

    from .routing import Policy

    def policies(s):
        ps = words(s)
        for p in ps:
            Policy.parse(p)
        return ps

    kw = dict(
        name=conv("experiment", "name", str.strip, "default"),
        policies=conv("experiment", "policies", policies, ExperimentSpec.policies),
        skews=conv("experiment", "skews", floats, ExperimentSpec.skews),
        cache_sizes=conv("experiment", "cache_sizes", ints, ExperimentSpec.cache_sizes),
        write_ratios=conv("experiment", "write_ratios", floats, ExperimentSpec.write_ratios),
        rack_counts=conv("experiment", "rack_counts", ints, ExperimentSpec.rack_counts),
        seeds=conv("experiment", "seeds", parse_seeds, ExperimentSpec.seeds),
        horizon=conv("experiment", "horizon", float, ExperimentSpec.horizon),
        out=conv("experiment", "out", str.strip, "results"),
        loss_target=conv("experiment", "loss_target", float, 0.01),
        theory_seeds=conv("experiment", "theory_seeds", int, 100),
        theory_m=conv("experiment", "theory_m", int, 32),
        fail_spines=conv("experiment", "fail_spines", int, 16),
        fail_racks=conv("experiment", "fail_racks", int, 16),
        fail_count=conv("experiment", "fail_count", int, 4),
        fail_phases=conv("experiment", "fail_phases", int, 4),
        system=system,
    )
    for axis in ("policies", "skews", "cache_sizes", "write_ratios", "rack_counts", "seeds"):
        if len(kw[axis]) == 0:
            fail("experiment", axis, f"{axis} must not be empty")
    try:
        return ExperimentSpec(**kw)
    except ConfigError as e:
        if e.key:
            fail("experiment", e.key, str(e).split("] ", 1)[-1])
        raise


def load_spec(path: str | Path) -> ExperimentSpec:
    return parse_spec(Path(path).read_text())
