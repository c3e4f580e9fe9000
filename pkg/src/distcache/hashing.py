"""Seeded two-layer hash partitioning and the induced object/cache-node graph.

Keys are fixed-width 16-byte identifiers. Each layer has its own seed, so the
upper-layer index ``h0`` and the lower-layer index ``h1`` of a key behave as
independent hash functions. Buckets are chosen by multiply-shift on the top
32 bits of a 64-bit hash, which avoids the bias of ``h % n``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

KEY_BYTES = 16
MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_C1 = 0xFF51AFD7ED558CCD
_C2 = 0xC4CEB9FE1A85EC53

ObjectId = bytes


class DuplicateKeyError(ValueError):
    pass


class NotInGraphError(KeyError):
    pass


def object_key(index: int) -> ObjectId:
    """16-byte key for integer object ``index`` (little-endian, zero padded)."""
    return int(index).to_bytes(KEY_BYTES, "little")


def key_index(key: ObjectId) -> int:
    return int.from_bytes(key, "little")


def as_object_id(key) -> ObjectId:
    if isinstance(key, int):
        return object_key(key)
    key = bytes(key)
    if len(key) != KEY_BYTES:
        raise ValueError(f"object ids are {KEY_BYTES} bytes, got {len(key)}")
    return key


def _fmix64(h: int) -> int:
    h ^= h >> 33
    h = (h * _C1) & MASK64
    h ^= h >> 33
    h = (h * _C2) & MASK64
    h ^= h >> 33
    return h


def hash64(key: ObjectId, seed: int) -> int:
    """Seeded 64-bit hash of a 16-byte key."""
    lo, hi = struct.unpack("<QQ", key)
    h = _fmix64(((seed + _GOLDEN) & MASK64) ^ lo)
    return _fmix64(((h + _GOLDEN) & MASK64) ^ hi)


def bucket(h: int, n: int) -> int:
    return ((h >> 32) * n) >> 32


def _fmix64_np(h: np.ndarray) -> np.ndarray:
    h = h ^ (h >> np.uint64(33))
    h = h * np.uint64(_C1)
    h = h ^ (h >> np.uint64(33))
    h = h * np.uint64(_C2)
    return h ^ (h >> np.uint64(33))


def hash64_words(lo: np.ndarray, hi: np.ndarray | None, seed: int) -> np.ndarray:
    """Vectorised :func:`hash64` over keys given as (lo, hi) uint64 words."""
    lo = np.asarray(lo, dtype=np.uint64)
    hi = np.zeros_like(lo) if hi is None else np.asarray(hi, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _fmix64_np(np.uint64((seed + _GOLDEN) & MASK64) ^ lo)
        return _fmix64_np((h + np.uint64(_GOLDEN)) ^ hi)


def bucket_np(h: np.ndarray, n: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        return ((h >> np.uint64(32)) * np.uint64(n)) >> np.uint64(32)


def key_words(keys: Sequence[ObjectId]) -> tuple[np.ndarray, np.ndarray]:
    if len(keys) == 0:
        empty = np.zeros(0, dtype=np.uint64)
        return empty, empty
    words = np.frombuffer(b"".join(keys), dtype="<u8").reshape(-1, 2)
    return words[:, 0].astype(np.uint64), words[:, 1].astype(np.uint64)


def _expand_weights(weights: Sequence[int] | None, n: int) -> tuple[int, ...] | None:
    if weights is None:
        return None
    if len(weights) != n or any(int(w) < 1 for w in weights):
        raise ValueError("node weights must be positive integers, one per node")
    virtual = []
    for node, w in enumerate(weights):
        virtual.extend([node] * int(w))
    return tuple(virtual)


@dataclass(frozen=True)
class Partitioner:
    """Two independent seeded hash maps onto the upper and lower cache layers.

    ``upper_weights``/``lower_weights`` split a node of capacity ``c`` units
    into ``c`` virtual buckets that all resolve to the same physical node.
    """

    seed0: int
    seed1: int
    m_upper: int
    m_lower: int
    upper_weights: tuple[int, ...] | None = None
    lower_weights: tuple[int, ...] | None = None
    _upper_virtual: tuple[int, ...] | None = field(init=False, repr=False, compare=False)
    _lower_virtual: tuple[int, ...] | None = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed0 == self.seed1:
            raise ValueError("seed0 and seed1 must differ")
        if self.m_upper < 1 or self.m_lower < 1:
            raise ValueError("each layer needs at least one node")
        object.__setattr__(self, "_upper_virtual", _expand_weights(self.upper_weights, self.m_upper))
        object.__setattr__(self, "_lower_virtual", _expand_weights(self.lower_weights, self.m_lower))

    def h0(self, key: ObjectId) -> int:
        virtual = self._upper_virtual
        if virtual is None:
            return bucket(hash64(key, self.seed0), self.m_upper)
        return virtual[bucket(hash64(key, self.seed0), len(virtual))]

    def h1(self, key: ObjectId) -> int:
        virtual = self._lower_virtual
        if virtual is None:
            return bucket(hash64(key, self.seed1), self.m_lower)
        return virtual[bucket(hash64(key, self.seed1), len(virtual))]

    def single(self, key: ObjectId) -> tuple[str, int]:
        """Single-hash baseline: one hash over the union of both layers."""
        n = self.m_upper + self.m_lower
        j = bucket(hash64(key, self.seed0 ^ self.seed1), n)
        return ("upper", j) if j < self.m_upper else ("lower", j - self.m_upper)

    def h0_many(self, lo: np.ndarray, hi: np.ndarray | None = None) -> np.ndarray:
        virtual = self._upper_virtual
        if virtual is None:
            return bucket_np(hash64_words(lo, hi, self.seed0), self.m_upper).astype(np.int64)
        idx = bucket_np(hash64_words(lo, hi, self.seed0), len(virtual)).astype(np.int64)
        return np.asarray(virtual, dtype=np.int64)[idx]

    def h1_many(self, lo: np.ndarray, hi: np.ndarray | None = None) -> np.ndarray:
        virtual = self._lower_virtual
        if virtual is None:
            return bucket_np(hash64_words(lo, hi, self.seed1), self.m_lower).astype(np.int64)
        idx = bucket_np(hash64_words(lo, hi, self.seed1), len(virtual)).astype(np.int64)
        return np.asarray(virtual, dtype=np.int64)[idx]


def locate(p: Partitioner, key: ObjectId) -> tuple[int, int]:
    return p.h0(key), p.h1(key)


@dataclass(frozen=True)
class BipartiteGraph:
    """Objects on the left; upper nodes ``("upper", i)`` and lower nodes
    ``("lower", j)`` on the right. In single-hash mode each object has one edge."""

    left: tuple[ObjectId, ...]
    m_upper: int
    m_lower: int
    edges: frozenset
    adjacency: dict
    node_adjacency: dict
    single_hash: bool = False

    @property
    def right(self) -> list[tuple[str, int]]:
        return [("upper", i) for i in range(self.m_upper)] + [("lower", j) for j in range(self.m_lower)]

    def nodes_of(self, key: ObjectId) -> tuple:
        try:
            return self.adjacency[key]
        except KeyError:
            raise NotInGraphError(key) from None

    def sorted_edges(self) -> list[tuple[ObjectId, tuple[str, int]]]:
        return sorted(self.edges)


def build_graph(p: Partitioner, objects: Iterable[ObjectId], single_hash: bool = False) -> BipartiteGraph:
    objects = tuple(as_object_id(o) for o in objects)
    if not objects:
        raise ValueError("need at least one object")
    if len(set(objects)) != len(objects):
        seen = set()
        dup = next(o for o in objects if o in seen or seen.add(o))
        raise DuplicateKeyError(f"duplicate key {dup.hex()}")
    adjacency = {}
    node_adj: dict = {node: [] for node in
                      [("upper", i) for i in range(p.m_upper)] + [("lower", j) for j in range(p.m_lower)]}
    edges = set()
    for o in objects:
        if single_hash:
            nodes = (p.single(o),)
        else:
            nodes = (("upper", p.h0(o)), ("lower", p.h1(o)))
        adjacency[o] = nodes
        for v in nodes:
            edges.add((o, v))
            node_adj[v].append(o)
    return BipartiteGraph(
        left=objects,
        m_upper=p.m_upper,
        m_lower=p.m_lower,
        edges=frozenset(edges),
        adjacency=adjacency,
        node_adjacency={v: tuple(us) for v, us in node_adj.items()},
        single_hash=single_hash,
    )


def graph_from_pairs(pairs: Sequence[tuple[int, int]], m_upper: int, m_lower: int) -> BipartiteGraph:
    """Graph with explicit (h0, h1) per object; object ``i`` gets key ``object_key(i)``."""
    adjacency = {}
    node_adj: dict = {("upper", i): [] for i in range(m_upper)}
    node_adj.update({("lower", j): [] for j in range(m_lower)})
    edges = set()
    left = []
    for i, (a, b) in enumerate(pairs):
        if not (0 <= a < m_upper and 0 <= b < m_lower):
            raise ValueError(f"object {i}: node pair ({a}, {b}) out of range")
        o = object_key(i)
        left.append(o)
        nodes = (("upper", a), ("lower", b))
        adjacency[o] = nodes
        for v in nodes:
            edges.add((o, v))
            node_adj[v].append(o)
    return BipartiteGraph(tuple(left), m_upper, m_lower, frozenset(edges), adjacency,
                          {v: tuple(us) for v, us in node_adj.items()})


def neighborhood(g: BipartiteGraph, s: Iterable[ObjectId]) -> set:
    out = set()
    for o in s:
        out.update(g.nodes_of(o))
    return out
