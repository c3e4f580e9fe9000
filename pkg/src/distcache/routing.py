"""Client-rack query routing: power-of-two-choices and the comparison policies."""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from .hashing import ObjectId, Partitioner, bucket, hash64

Node = tuple  # ("upper", i) | ("lower", j)


class Policy(enum.Enum):
    POT = "distcache"
    PARTITION_ONLY = "partition"
    REPLICATION = "replication"
    NOCACHE = "nocache"
    SINGLE_HASH_UNIFORM = "single_hash"

    @classmethod
    def parse(cls, name: str) -> "Policy":
        name = name.strip().lower()
        for p in cls:
            if name in (p.value, p.name.lower()):
                return p
        raise ValueError(f"unknown policy {name!r}")


CACHING_POLICIES = (Policy.POT, Policy.PARTITION_ONLY, Policy.REPLICATION)


def node_id(node: Node, m_upper: int) -> int:
    """16-bit wire id: upper nodes first, then lower nodes."""
    layer, idx = node
    return idx if layer == "upper" else m_upper + idx


def node_from_id(nid: int, m_upper: int) -> Node:
    return ("upper", nid) if nid < m_upper else ("lower", nid - m_upper)


def home_server(p: Partitioner, key: ObjectId, servers_per_rack: int, seed: int = 0x51) -> tuple[int, int]:
    """Storage server of ``key``: the rack is the lower-layer partition, the
    server inside the rack comes from a third hash."""
    return p.h1(key), bucket(hash64(key, p.seed0 ^ seed), servers_per_rack)


@dataclass
class LoadTable:
    """Last load heard per cache node; written only by telemetry stamps."""

    loads: dict = field(default_factory=dict)
    updated_at: dict = field(default_factory=dict)

    def get(self, node: Node) -> int:
        return self.loads.get(node, 0)

    def update(self, node: Node, load: int, now: float) -> None:
        # last writer wins in arrival order, even for older stamps
        self.loads[node] = int(load)
        self.updated_at[node] = now


class HotSetView(Protocol):
    def upper_nodes(self, key: ObjectId) -> Sequence[int]: ...

    def lower_node(self, key: ObjectId) -> int | None: ...


@dataclass(frozen=True)
class Destination:
    kind: str  # "cache" or "server"
    node: Node | None = None
    server: tuple[int, int] | None = None
    via_upper: int | None = None  # spine a server-bound query passes through


@dataclass(frozen=True)
class Stamp:
    node_id: int
    load: int

    def __post_init__(self):
        if not (0 <= self.node_id < 1 << 16) or not (0 <= self.load < 1 << 32):
            raise ValueError("stamp fields are 16-bit node id and 32-bit load")


@dataclass
class Router:
    policy: Policy
    partitioner: Partitioner
    servers_per_rack: int
    seed: int = 0
    universe: int | None = None
    upper_alive: Sequence[bool] | None = None
    bypass_upper_on_lower_hit: bool = False
    rng: random.Random = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = random.Random(self.seed ^ 0xA11CE)
        self.set_upper_alive(self.upper_alive or [True] * self.partitioner.m_upper)

    def _check(self, key: ObjectId) -> None:
        if len(key) != 16:
            raise ValueError("object ids are 16 bytes")
        if self.universe is not None and int.from_bytes(key, "little") >= self.universe:
            raise ValueError("key outside the object universe")

    def home(self, key: ObjectId) -> tuple[int, int]:
        return home_server(self.partitioner, key, self.servers_per_rack)

    def pass_through(self) -> int:
        alive = self._alive
        if not alive:
            return -1
        return alive[int(self.rng.random() * len(alive))]

    def set_upper_alive(self, alive: Sequence[bool]) -> None:
        self.upper_alive = list(alive)
        self._alive = [i for i, a in enumerate(self.upper_alive) if a]

    def _server(self, key: ObjectId, home=None) -> Destination:
        return Destination("server", None, home or self.home(key), self.pass_through())

    def route_get(self, table: LoadTable, key: ObjectId, hotset: HotSetView, home=None) -> Destination:
        """``home`` may be passed in when the caller already hashed the key."""
        self._check(key)
        pol = self.policy
        if pol is Policy.NOCACHE:
            return self._server(key, home)
        if pol is Policy.SINGLE_HASH_UNIFORM:
            return Destination("cache", self.partitioner.single(key))
        uppers = list(hotset.upper_nodes(key))
        lower = hotset.lower_node(key)
        if pol is Policy.PARTITION_ONLY:
            uppers = []
        elif pol is Policy.REPLICATION:
            if uppers:
                return Destination("cache", ("upper", uppers[int(self.rng.random() * len(uppers))]))
        cands = [("upper", u) for u in uppers] + ([("lower", lower)] if lower is not None else [])
        if not cands:
            return self._server(key, home)
        if len(cands) == 1:
            return Destination("cache", cands[0])
        return Destination("cache", self.choose(table, cands[0], cands[1]))

    def choose(self, table: LoadTable, a: Node, b: Node) -> Node:
        la, lb = table.get(a), table.get(b)
        if la < lb:
            return a
        if lb < la:
            return b
        return a if self.rng.random() < 0.5 else b

    def route_set(self, key: ObjectId, home=None) -> Destination:
        return self._server(key, home)

    def absorb_telemetry(self, table: LoadTable, stamps: Sequence[Stamp], now: float) -> None:
        m = self.partitioner.m_upper
        for s in stamps:
            table.update(node_from_id(s.node_id, m), s.load, now)
