"""Controller side: cache partitions per layer, hot-set budgets and refresh commands."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .hashing import ObjectId, Partitioner
from .ring import VNODES, HashRing
from .routing import Policy


class PartitionViolation(ValueError):
    pass


@dataclass(frozen=True)
class PartitionMap:
    """Owner of each key per layer. Upper owners follow ``h0`` unless the node
    has failed, in which case the key moves along a ring of the survivors."""

    partitioner: Partitioner
    version: int = 0
    failed_upper: frozenset = frozenset()
    ring_seed: int = 0x7153
    vnodes: int = VNODES
    _ring: HashRing | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.failed_upper:
            alive = [i for i in range(self.partitioner.m_upper) if i not in self.failed_upper]
            if not alive:
                raise ValueError("no surviving upper node to take over")
            object.__setattr__(self, "_ring", HashRing.build(alive, self.ring_seed, self.vnodes))

    def owner(self, layer: str, key: ObjectId) -> int:
        if layer == "lower":
            return self.partitioner.h1(key)
        if layer != "upper":
            raise ValueError(f"unknown layer {layer!r}")
        a = self.partitioner.h0(key)
        if a in self.failed_upper:
            return self._ring.lookup(key)
        return a

    def owns(self, layer: str, node: int, key: ObjectId) -> bool:
        return self.owner(layer, key) == node

    def fail(self, node: int) -> "PartitionMap":
        if not 0 <= node < self.partitioner.m_upper:
            raise ValueError(f"unknown upper node {node}")
        return replace(self, version=self.version + 1, failed_upper=self.failed_upper | {node}, _ring=None)

    def recover(self, node: int) -> "PartitionMap":
        if not 0 <= node < self.partitioner.m_upper:
            raise ValueError(f"unknown upper node {node}")
        return replace(self, version=self.version + 1, failed_upper=self.failed_upper - {node}, _ring=None)

    def dump(self) -> str:
        p = self.partitioner
        lines = ["# layer node seed version state"]
        for i in range(p.m_upper):
            state = "failed" if i in self.failed_upper else "up"
            lines.append(f"upper {i} {p.seed0} {self.version} {state}")
        for j in range(p.m_lower):
            lines.append(f"lower {j} {p.seed1} {self.version} up")
        return "\n".join(lines) + "\n"


def compute_partitions(p: Partitioner, version: int = 0, ring_seed: int = 0x7153) -> PartitionMap:
    return PartitionMap(p, version=version + 1, ring_seed=ring_seed)


@dataclass(frozen=True)
class Budgets:
    """Hot-set sizes. ``per_node`` is the slot budget of every cache node; the
    layer totals default to ``ceil(c * n ln n)`` unless given explicitly."""

    per_node: int = 100
    c_upper: float = 1.0
    c_lower: float = 1.0
    upper_total: int | None = None
    lower_per_rack: int | None = None

    @classmethod
    def per_node_only(cls, n: int) -> "Budgets":
        return cls(per_node=n, upper_total=10**12, lower_per_rack=n)

    def upper(self, m: int) -> int:
        if self.upper_total is not None:
            return min(self.upper_total, self.per_node * m)
        return min(_nlogn(m, self.c_upper), self.per_node * m)

    def lower(self, l: int) -> int:
        if self.lower_per_rack is not None:
            return min(self.lower_per_rack, self.per_node)
        return min(_nlogn(l, self.c_lower), self.per_node)


def _nlogn(n: int, c: float) -> int:
    return max(1, math.ceil(c * n * math.log(n))) if n > 1 else 1


@dataclass(frozen=True)
class Command:
    kind: str  # "insert" | "evict"
    layer: str
    node: int
    key: ObjectId


@dataclass
class HotSet:
    """Which keys each cache node holds; doubles as the routing view."""

    upper: dict = field(default_factory=dict)  # node -> set of keys
    lower: dict = field(default_factory=dict)
    _key_upper: dict = field(default_factory=dict, repr=False)
    _key_lower: dict = field(default_factory=dict, repr=False)

    def upper_nodes(self, key: ObjectId) -> tuple[int, ...]:
        return self._key_upper.get(key, ())

    def lower_node(self, key: ObjectId) -> int | None:
        return self._key_lower.get(key)

    def keys_at(self, layer: str, node: int) -> set:
        return (self.upper if layer == "upper" else self.lower).get(node, set())

    def add(self, layer: str, node: int, key: ObjectId) -> None:
        if layer == "upper":
            self.upper.setdefault(node, set()).add(key)
            self._key_upper[key] = tuple(sorted(set(self._key_upper.get(key, ())) | {node}))
        else:
            prev = self._key_lower.get(key)
            if prev is not None and prev != node:
                raise PartitionViolation("key already cached in the lower layer")
            self.lower.setdefault(node, set()).add(key)
            self._key_lower[key] = node

    def remove(self, layer: str, node: int, key: ObjectId) -> None:
        if layer == "upper":
            self.upper.get(node, set()).discard(key)
            rest = tuple(n for n in self._key_upper.get(key, ()) if n != node)
            if rest:
                self._key_upper[key] = rest
            else:
                self._key_upper.pop(key, None)
        else:
            self.lower.get(node, set()).discard(key)
            if self._key_lower.get(key) == node:
                del self._key_lower[key]

    def apply(self, commands: Iterable[Command]) -> None:
        for c in commands:
            if c.kind == "evict":
                self.remove(c.layer, c.node, c.key)
            else:
                self.add(c.layer, c.node, c.key)

    def drop_node(self, layer: str, node: int) -> list[ObjectId]:
        keys = sorted(self.keys_at(layer, node))
        for k in keys:
            self.remove(layer, node, k)
        return keys


def target_sets(policy: Policy, scores: Mapping[ObjectId, float], pmap: PartitionMap, budgets: Budgets,
                servers_per_rack: int) -> tuple[dict, dict]:
    """Per-node target key sets for ``policy`` given per-key popularity scores."""
    p = pmap.partitioner
    ranked = sorted((k for k, s in scores.items() if s > 0), key=lambda k: (-scores[k], k))
    alive = [i for i in range(p.m_upper) if i not in pmap.failed_upper]
    upper: dict = {i: set() for i in alive}
    lower: dict = {j: set() for j in range(p.m_lower)}
    if policy in (Policy.NOCACHE, Policy.SINGLE_HASH_UNIFORM):
        return upper, lower
    if policy is Policy.POT:
        total, left = 0, budgets.upper(p.m_upper)
        for k in ranked:
            if total >= left:
                break
            a = pmap.owner("upper", k)
            if len(upper[a]) < budgets.per_node:
                upper[a].add(k)
                total += 1
    elif policy is Policy.REPLICATION:
        top = set(ranked[: budgets.per_node])
        for i in alive:
            upper[i] = set(top)
    cap = budgets.lower(servers_per_rack)
    for k in ranked:
        b = p.h1(k)
        if len(lower[b]) < cap:
            lower[b].add(k)
    return upper, lower


def diff_commands(hot: HotSet, upper: Mapping[int, set], lower: Mapping[int, set]) -> list[Command]:
    cmds: list[Command] = []
    for layer, target in (("upper", upper), ("lower", lower)):
        current = hot.upper if layer == "upper" else hot.lower
        for node in sorted(set(target) | set(current)):
            have, want = current.get(node, set()), target.get(node, set())
            cmds += [Command("evict", layer, node, k) for k in sorted(have - want)]
            cmds += [Command("insert", layer, node, k) for k in sorted(want - have)]
    return cmds


def aggregate_reports(reports: Mapping[tuple, list]) -> dict:
    """Sum per-node heavy-hitter estimates into one score per key."""
    scores: dict = {}
    for node in sorted(reports):
        for key, est in reports[node]:
            scores[key] = scores.get(key, 0) + est
    return scores


def refresh_hot_set(hot: HotSet, reports: Mapping[tuple, list], pmap: PartitionMap, policy: Policy,
                    budgets: Budgets, servers_per_rack: int) -> list[Command]:
    """Commands that move ``hot`` to the top keys of the latest reports.

    Every command respects the partition map: upper keys land on their upper
    owner (or on every live spine for replication), lower keys on ``h1``.
    """
    upper, lower = target_sets(policy, aggregate_reports(reports), pmap, budgets, servers_per_rack)
    cmds = diff_commands(hot, upper, lower)
    for c in cmds:
        if c.kind == "insert" and policy is not Policy.REPLICATION and not pmap.owns(c.layer, c.node, c.key):
            raise PartitionViolation(f"{c.key.hex()} is not in the partition of {c.layer} {c.node}")
    return cmds
