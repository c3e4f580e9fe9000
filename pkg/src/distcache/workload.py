"""Seeded query streams with uniform or Zipfian popularity.

Object ``i`` (0-based rank) has popularity ``(i + 1) ** -skew``. Two samplers
are provided: an exact inverse-CDF lookup over a cumulative table, and the
rejection-inversion method of Hormann and Derflinger, which needs O(1) memory
and is used for large universes.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .hashing import ObjectId, object_key

MAX_VALUE_BYTES = 128
BLOCK = 4096


@dataclass(frozen=True)
class QueryDistribution:
    probs: np.ndarray
    total_rate: float = 1.0
    skew: float = 0.0
    retained_mass: float = 1.0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probs must be a non-empty vector")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be non-negative and sum to 1")
        object.__setattr__(self, "probs", probs)

    @property
    def universe(self) -> int:
        return int(self.probs.size)

    @property
    def rates(self) -> np.ndarray:
        return self.probs * self.total_rate

    def with_rate(self, total_rate: float) -> "QueryDistribution":
        return QueryDistribution(self.probs, total_rate, self.skew, self.retained_mass)


def harmonic(universe: int, skew: float) -> float:
    """Generalised harmonic number by direct summation (smallest terms first)."""
    return float(np.sum(np.arange(universe, 0, -1, dtype=float) ** -skew))


def zipf_probs(universe: int, skew: float, total_rate: float = 1.0) -> QueryDistribution:
    if universe < 1:
        raise ValueError("universe must be >= 1")
    if skew < 0:
        raise ValueError("skew must be >= 0")
    weights = np.arange(1, universe + 1, dtype=float) ** -skew
    return QueryDistribution(weights / weights.sum(), total_rate, skew)


def truncate_to_hot(d: QueryDistribution, k: int) -> QueryDistribution:
    """Keep the ``k`` most popular objects and renormalise."""
    if k < 1 or k > d.universe:
        raise ValueError(f"k must be in [1, {d.universe}]")
    kept = d.probs[np.sort(np.argsort(-d.probs, kind="stable")[:k])]
    mass = float(kept.sum())
    return QueryDistribution(kept / mass, d.total_rate, d.skew, d.retained_mass * mass)


def cap_max_rate(d: QueryDistribution, cap: float) -> QueryDistribution:
    """Clip per-object rates at ``cap`` and spread the excess over the rest.

    Water-filling keeps the total rate while enforcing ``max p_i * R <= cap``.
    """
    rates = d.rates.astype(float)
    if cap * rates.size < d.total_rate * (1 - 1e-12):
        raise ValueError("cap too small: cannot carry the total rate")
    clipped = np.zeros(rates.size, dtype=bool)
    for _ in range(rates.size):
        over = rates > cap * (1 + 1e-12)
        if not over.any():
            break
        excess = float((rates[over] - cap).sum())
        rates[over] = cap
        clipped |= over
        free = ~clipped
        rates[free] += excess * rates[free] / rates[free].sum()
    return QueryDistribution(rates / rates.sum(), d.total_rate, d.skew, d.retained_mass)


class TableSampler:
    """Exact inverse-CDF sampler over a precomputed cumulative table."""

    def __init__(self, d: QueryDistribution):
        self.cdf = np.cumsum(d.probs)
        self.cdf[-1] = 1.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = np.searchsorted(self.cdf, rng.random(n), side="right")
        return np.minimum(idx, self.cdf.size - 1)


class RejectionInversionSampler:
    """Zipf sampler on ranks 0..n-1 by rejection-inversion (O(1) memory)."""

    def __init__(self, universe: int, skew: float):
        if universe < 1 or skew < 0:
            raise ValueError("need universe >= 1 and skew >= 0")
        self.n = universe
        self.s = float(skew)
        self._hx1 = self._H(1.5) - 1.0
        self._hn = self._H(universe + 0.5)
        self._squeeze = 2.0 - self._H_inv(self._H(2.5) - self._h(2.0))

    def _h(self, x):
        return np.exp(-self.s * np.log(x))

    def _H(self, x):
        # integral of h; written via expm1 so s -> 1 is stable
        log_x = np.log(x)
        t = (1.0 - self.s) * log_x
        return _expm1_over(t) * log_x

    def _H_inv(self, x):
        t = x * (1.0 - self.s)
        t = np.maximum(t, -1.0 + 1e-15)
        return np.exp(_log1p_over(t) * x)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        todo = np.arange(n)
        while todo.size:
            u = self._hn + rng.random(todo.size) * (self._hx1 - self._hn)
            x = self._H_inv(u)
            k = np.clip(np.floor(x + 0.5), 1, self.n)
            accept = (k - x <= self._squeeze) | (u >= self._H(k + 0.5) - self._h(k))
            out[todo[accept]] = k[accept].astype(np.int64) - 1
            todo = todo[~accept]
        return out


def _expm1_over(t):
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < 1e-8
    safe = np.where(small, 1.0, t)
    return np.where(small, 1.0 + t / 2.0, np.expm1(safe) / safe)


def _log1p_over(t):
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < 1e-8
    safe = np.where(small, 1.0, t)
    return np.where(small, 1.0 - t / 2.0, np.log1p(safe) / safe)


class Op(enum.Enum):
    GET = "GET"
    SET = "SET"


@dataclass(frozen=True)
class Query:
    op: Op
    key: ObjectId
    value: bytes | None
    timestamp: float
    client_rack: int
    index: int = 0

    def __post_init__(self):
        if self.op is Op.GET and self.value is not None:
            raise ValueError("GET carries no value")
        if self.op is Op.SET and not (1 <= len(self.value or b"") <= MAX_VALUE_BYTES):
            raise ValueError("SET value must be 1..128 bytes")


def value_for(key_rank: int, version: int, size: int = 16) -> bytes:
    """Deterministic payload that encodes (key, version); used by monitors."""
    raw = key_rank.to_bytes(8, "little") + version.to_bytes(8, "little")
    return (raw * (size // 16 + 1))[:size]


@dataclass
class QueryBlock:
    ranks: np.ndarray
    is_write: np.ndarray
    client: np.ndarray
    times: np.ndarray


@dataclass
class QueryStream:
    """Replayable query stream: block ``b`` is drawn from ``rng([seed, b])``.

    ``arrival`` is ``"poisson"`` or ``"fixed"``; timestamps start at 0.
    """

    dist: QueryDistribution
    seed: int
    write_ratio: float = 0.0
    client_racks: int = 1
    arrival: str = "fixed"
    sampler: str = "table"
    value_size: int = 16
    index: int = 0
    _block_id: int = field(default=-1, repr=False)
    _block: QueryBlock | None = field(default=None, repr=False)
    _block_t0: list = field(default_factory=lambda: [0.0], repr=False)
    _impl: object = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.write_ratio <= 1.0:
            raise ValueError("write_ratio must be in [0, 1]")
        if self.arrival not in ("poisson", "fixed"):
            raise ValueError("arrival must be 'poisson' or 'fixed'")
        if self.sampler == "table":
            self._impl = TableSampler(self.dist)
        elif self.sampler == "rejection":
            self._impl = RejectionInversionSampler(self.dist.universe, self.dist.skew)
        else:
            raise ValueError("sampler must be 'table' or 'rejection'")

    def block(self, b: int) -> QueryBlock:
        if b == self._block_id:
            return self._block
        # poisson arrival times chain across blocks, so earlier blocks fix the offset
        while len(self._block_t0) <= b:
            prev = len(self._block_t0) - 1
            self._block_t0.append(float(self._draw(prev, self._block_t0[prev]).times[-1]))
        blk = self._draw(b, self._block_t0[b])
        if len(self._block_t0) == b + 1:
            self._block_t0.append(float(blk.times[-1]))
        self._block_id, self._block = b, blk
        return blk

    def _draw(self, b: int, t0: float) -> QueryBlock:
        rng = np.random.default_rng([self.seed, b])
        ranks = self._impl.sample(rng, BLOCK)
        is_write = rng.random(BLOCK) < self.write_ratio
        client = rng.integers(0, self.client_racks, BLOCK)
        rate = self.dist.total_rate
        if self.arrival == "poisson":
            gaps = rng.exponential(1.0 / rate, BLOCK) if rate > 0 else np.full(BLOCK, np.inf)
            times = t0 + np.cumsum(gaps)
        else:
            times = (b * BLOCK + 1 + np.arange(BLOCK)) / rate if rate > 0 else np.full(BLOCK, np.inf)
        return QueryBlock(ranks, is_write, client, times)

    def query_at(self, index: int) -> Query:
        blk = self.block(index // BLOCK)
        i = index % BLOCK
        rank = int(blk.ranks[i])
        if blk.is_write[i]:
            return Query(Op.SET, object_key(rank), value_for(rank, index, self.value_size),
                         float(blk.times[i]), int(blk.client[i]), index)
        return Query(Op.GET, object_key(rank), None, float(blk.times[i]), int(blk.client[i]), index)


def next_query(stream: QueryStream, write_ratio: float | None = None) -> Query:
    """Draw the next query. Passing ``write_ratio`` rebinds the stream's ratio."""
    if write_ratio is not None and write_ratio != stream.write_ratio:
        if not 0.0 <= write_ratio <= 1.0:
            raise ValueError("write_ratio must be in [0, 1]")
        stream.write_ratio = write_ratio
        stream._block_id = -1
    q = stream.query_at(stream.index)
    stream.index += 1
    return q


def hot_set_size(m: int, c: float = 1.0) -> int:
    return max(1, math.ceil(c * m * math.log(m))) if m > 1 else 1
