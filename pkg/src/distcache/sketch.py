"""Count-Min sketch, Bloom filter and the per-epoch heavy-hitter detector."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .hashing import MASK64, ObjectId, bucket_np, hash64, hash64_words, key_words

CM_ROWS = 4
CM_WIDTH = 1 << 16
CM_MAX = (1 << 16) - 1
BLOOM_ARRAYS = 3
BLOOM_BITS = 1 << 18


def derive_seeds(base: int, n: int) -> list[int]:
    """``n`` well-separated 64-bit seeds from one base seed."""
    return [hash64((base & MASK64).to_bytes(8, "little") + i.to_bytes(8, "little"), 0x5EED) for i in range(n)]


class CountMinSketch:
    """Count-Min sketch with saturating 16-bit counters."""

    def __init__(self, seeds: Sequence[int], width: int = CM_WIDTH):
        self.seeds = list(seeds)
        self.width = width
        self.table = np.zeros((len(self.seeds), width), dtype=np.uint16)

    @property
    def rows(self) -> int:
        return len(self.seeds)

    def _index(self, lo, hi) -> np.ndarray:
        return np.stack([bucket_np(hash64_words(lo, hi, s), self.width).astype(np.int64) for s in self.seeds])

    def add_many(self, lo: np.ndarray, hi: np.ndarray, counts: np.ndarray | None = None) -> None:
        if len(lo) == 0:
            return
        counts = np.ones(len(lo), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)
        idx = self._index(lo, hi)
        for r in range(self.rows):
            acc = np.bincount(idx[r], weights=counts, minlength=self.width)
            # adding then clipping equals per-packet saturation since increments are positive
            row = self.table[r].astype(np.int64) + acc.astype(np.int64)
            self.table[r] = np.minimum(row, CM_MAX).astype(np.uint16)

    def add(self, key: ObjectId, count: int = 1) -> None:
        lo, hi = key_words([key])
        self.add_many(lo, hi, np.array([count]))

    def estimate_many(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        if len(lo) == 0:
            return np.zeros(0, dtype=np.int64)
        idx = self._index(lo, hi)
        est = self.table[np.arange(self.rows)[:, None], idx]
        return est.min(axis=0).astype(np.int64)

    def estimate(self, key: ObjectId) -> int:
        lo, hi = key_words([key])
        return int(self.estimate_many(lo, hi)[0])

    def clear(self) -> None:
        self.table[:] = 0


class BloomFilter:
    def __init__(self, seeds: Sequence[int], bits: int = BLOOM_BITS):
        self.seeds = list(seeds)
        self.bits = bits
        self.arrays = np.zeros((len(self.seeds), bits), dtype=bool)

    def _index(self, lo, hi) -> np.ndarray:
        return np.stack([bucket_np(hash64_words(lo, hi, s), self.bits).astype(np.int64) for s in self.seeds])

    def add_many(self, lo, hi) -> None:
        if len(lo):
            idx = self._index(lo, hi)
            for r in range(len(self.seeds)):
                self.arrays[r, idx[r]] = True

    def contains_many(self, lo, hi) -> np.ndarray:
        if len(lo) == 0:
            return np.zeros(0, dtype=bool)
        idx = self._index(lo, hi)
        return self.arrays[np.arange(len(self.seeds))[:, None], idx].all(axis=0)

    def add(self, key: ObjectId) -> None:
        self.add_many(*key_words([key]))

    def __contains__(self, key: ObjectId) -> bool:
        return bool(self.contains_many(*key_words([key]))[0])

    def clear(self) -> None:
        self.arrays[:] = False


@dataclass
class HeavyHitterDetector:
    """Per-epoch heavy-hitter detector.

    Each packet updates the sketch. A key whose estimate reaches
    ``report_threshold`` is reported once per epoch; the Bloom filter remembers
    reported keys so they are not reported again. Sketch seeds derive from
    ``(node_id, epoch)``, so consecutive epochs hash independently.
    """

    node_id: int = 0
    rows: int = CM_ROWS
    width: int = CM_WIDTH
    bloom_arrays: int = BLOOM_ARRAYS
    bloom_bits: int = BLOOM_BITS
    report_threshold: int = 1
    epoch: int = 0
    cms: CountMinSketch = field(init=False)
    bloom: BloomFilter = field(init=False)
    reported: dict = field(init=False, default_factory=dict)
    last_cms: CountMinSketch | None = field(init=False, default=None)
    last_reported: dict = field(init=False, default_factory=dict)

    def __post_init__(self):
        self._fresh()

    def _fresh(self) -> None:
        seeds = derive_seeds((self.node_id << 32) ^ self.epoch, self.rows + self.bloom_arrays)
        self.cms = CountMinSketch(seeds[: self.rows], self.width)
        self.bloom = BloomFilter(seeds[self.rows:], self.bloom_bits)
        self.reported = {}

    def observe_many(self, keys: Sequence[ObjectId]) -> None:
        if not keys:
            return
        uniq, counts = np.unique(np.frombuffer(b"".join(keys), dtype="S16"), return_counts=True)
        ukeys = [bytes(u).ljust(16, b"\0") for u in uniq]
        lo, hi = key_words(ukeys)
        self.cms.add_many(lo, hi, counts)
        est = self.cms.estimate_many(lo, hi)
        seen = self.bloom.contains_many(lo, hi)
        hot = (est >= self.report_threshold) & ~seen
        if hot.any():
            sel = np.nonzero(hot)[0]
            self.bloom.add_many(lo[sel], hi[sel])
            for i in sel:
                self.reported[ukeys[i]] = int(est[i])

    def observe(self, key: ObjectId) -> None:
        self.observe_many([key])

    def estimate(self, key: ObjectId, completed: bool = False) -> int:
        cms = self.last_cms if completed else self.cms
        return 0 if cms is None else cms.estimate(key)

    def estimate_many(self, keys: Sequence[ObjectId], completed: bool = False) -> np.ndarray:
        cms = self.last_cms if completed else self.cms
        if cms is None or not keys:
            return np.zeros(len(keys), dtype=np.int64)
        return cms.estimate_many(*key_words(list(keys)))

    def rotate(self) -> None:
        """Close the epoch: keep a snapshot for reporting and reset counters."""
        self.last_cms = self.cms
        self.last_reported = self.reported
        self.epoch += 1
        self._fresh()

    def top_k(self, k: int, extra: Sequence[ObjectId] = ()) -> list[tuple[ObjectId, int]]:
        """Top ``k`` of the last completed epoch over reported keys plus ``extra``."""
        if k < 1:
            raise ValueError("k must be >= 1")
        cand = sorted(set(self.last_reported) | set(extra))
        if not cand or self.last_cms is None:
            return []
        est = self.estimate_many(cand, completed=True)
        ranked = sorted(((key, int(e)) for key, e in zip(cand, est) if e > 0), key=lambda t: (-t[1], t[0]))
        return ranked[:k]
