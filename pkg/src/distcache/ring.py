"""Consistent-hash ring with virtual nodes."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable

from .hashing import ObjectId, hash64

VNODES = 64


@dataclass
class HashRing:
    seed: int
    vnodes: int = VNODES
    _points: list = field(default_factory=list, repr=False)
    _owners: list = field(default_factory=list, repr=False)
    members: set = field(default_factory=set)

    @classmethod
    def build(cls, nodes: Iterable[int], seed: int, vnodes: int = VNODES) -> "HashRing":
        ring = cls(seed, vnodes)
        for n in nodes:
            ring.add(n)
        return ring

    def _vpoints(self, node: int) -> list[int]:
        return [hash64(node.to_bytes(8, "little") + v.to_bytes(8, "little"), self.seed) for v in range(self.vnodes)]

    def add(self, node: int) -> None:
        if node in self.members:
            return
        self.members.add(node)
        for p in self._vpoints(node):
            i = bisect.bisect_left(self._points, (p, node))
            self._points.insert(i, (p, node))
        self._owners = [n for _, n in self._points]

    def remove(self, node: int) -> None:
        if node not in self.members:
            return
        self.members.discard(node)
        self._points = [(p, n) for p, n in self._points if n != node]
        self._owners = [n for _, n in self._points]

    def lookup(self, key: ObjectId) -> int:
        if not self._points:
            raise LookupError("ring is empty")
        h = hash64(key, self.seed ^ 0xC0FFEE)
        i = bisect.bisect_right(self._points, (h, 1 << 64))
        return self._owners[i % len(self._points)]
