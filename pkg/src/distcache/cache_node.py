"""One cache switch: bounded key-value store, heavy-hitter detector, load counter."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .hashing import ObjectId
from .sketch import HeavyHitterDetector
from .workload import MAX_VALUE_BYTES

DEFAULT_SLOTS = 100


class UpdateResult(enum.Enum):
    ACKED = "acked"
    STALE = "stale_rejected"
    NOT_CACHED = "not_cached"


@dataclass
class CacheEntry:
    key: ObjectId
    value: bytes | None
    valid: bool
    version: int
    fill_token: int | None = None  # set while a reserved slot awaits its first fill


@dataclass(frozen=True)
class Hit:
    value: bytes
    version: int


class CacheFullError(RuntimeError):
    pass


@dataclass
class CacheNode:
    """State of a single cache node.

    ``telemetry`` picks what reply stamps carry: ``"running"`` is the packet
    count of the current window (the register a passing reply reads),
    ``"window"`` is the last completed window, same as :meth:`report_load`.
    """

    node_id: int
    slots: int = DEFAULT_SLOTS
    aging: bool = True
    age_after: int = 1
    decay: float = 0.5
    telemetry: str = "running"
    hh_rows: int = 4
    hh_width: int = 1 << 16
    hh_threshold: int = 1
    track_hh: bool = True  # off: the detector sees nothing and victims tie-break by key
    entries: dict = field(default_factory=dict)
    window_count: int = 0
    last_report: int = 0
    silent_windows: int = 0
    alive: bool = True
    _tokens: int = 0
    hh: HeavyHitterDetector = field(init=False)
    _pending: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.slots < 0:
            raise ValueError("slots must be >= 0")
        if self.telemetry not in ("running", "window"):
            raise ValueError("telemetry must be 'running' or 'window'")
        self.hh = HeavyHitterDetector(self.node_id, rows=self.hh_rows, width=self.hh_width,
                                      report_threshold=self.hh_threshold)

    # ---- data path --------------------------------------------------------------------

    def count_packet(self, key: ObjectId | None = None) -> None:
        self.window_count += 1
        if key is not None and self.track_hh:
            self._pending.append(key)

    def observe_passing(self, key: ObjectId) -> None:
        """Feed a forwarded query to the heavy-hitter detector without charging load."""
        if self.track_hh:
            self._pending.append(key)

    def cache_get(self, key: ObjectId) -> Hit | None:
        self.count_packet(key)
        e = self.entries.get(key)
        if e is not None and e.valid:
            return Hit(e.value, e.version)
        return None

    def peek(self, key: ObjectId) -> CacheEntry | None:
        return self.entries.get(key)

    def is_cached(self, key: ObjectId) -> bool:
        return key in self.entries

    def invalidate(self, key: ObjectId, version: int | None = None) -> int:
        """Mark ``key`` invalid; returns the stored version (0 if absent).

        A carried ``version`` is remembered, so phase-2 packets of earlier
        writes that arrive late cannot revalidate the entry.
        """
        e = self.entries.get(key)
        if e is None:
            return 0
        e.valid = False
        if version is not None and version > e.version:
            e.version = version
            e.value = None
        return e.version

    def apply_update(self, key: ObjectId, value: bytes, version: int, token: int | None = None) -> UpdateResult:
        """Install ``(value, version)`` behind the version gate.

        A reserved slot only takes the fill carrying its reservation token, so a
        late phase-2 packet of an older write cannot populate a fresh slot.
        """
        if value is None or len(value) > MAX_VALUE_BYTES:
            raise ValueError(f"value must be at most {MAX_VALUE_BYTES} bytes")
        e = self.entries.get(key)
        if e is None:
            return UpdateResult.NOT_CACHED
        if e.fill_token is not None:
            if token != e.fill_token or version < e.version:
                return UpdateResult.STALE
            e.value, e.version, e.valid, e.fill_token = value, version, True, None
            return UpdateResult.ACKED
        if version > e.version or (version == e.version and not e.valid):
            e.value, e.version, e.valid = value, version, True
            return UpdateResult.ACKED
        return UpdateResult.STALE

    # ---- slot management --------------------------------------------------------------

    def reserve(self, key: ObjectId) -> ObjectId | None:
        """Create an invalid slot for ``key``; returns the evicted key if any.

        The slot's fill token is available as ``peek(key).fill_token``.
        """
        if key in self.entries:
            return None
        victim = None
        if len(self.entries) >= self.slots:
            if self.slots == 0:
                raise CacheFullError(f"node {self.node_id} has no slots")
            victim = self._victim()
            del self.entries[victim]
        self._tokens += 1
        self.entries[key] = CacheEntry(key, None, False, 0, self._tokens)
        return victim

    def install(self, key: ObjectId, value: bytes, version: int) -> None:
        """Direct valid install, used to pre-populate caches before a run."""
        if key not in self.entries and len(self.entries) >= self.slots:
            raise CacheFullError(f"node {self.node_id} is full")
        self.entries[key] = CacheEntry(key, value, True, version)

    def _victim(self) -> ObjectId:
        self.flush()
        keys = sorted(self.entries)
        valid = [k for k in keys if self.entries[k].valid] or keys
        # recent popularity: the last full epoch plus the one in progress
        est = self.hh.estimate_many(valid) + self.hh.estimate_many(valid, completed=True)
        best = min(range(len(valid)), key=lambda i: (int(est[i]), valid[i]))
        return valid[best]

    def evict(self, key: ObjectId) -> bool:
        return self.entries.pop(key, None) is not None

    def cached_keys(self) -> list[ObjectId]:
        return sorted(self.entries)

    # ---- load + heavy hitters ---------------------------------------------------------

    def flush(self) -> None:
        if self._pending:
            self.hh.observe_many(self._pending)
            self._pending = []

    def report_load(self) -> int:
        return self.last_report

    def current_load(self) -> int:
        return self.window_count

    def telemetry_load(self) -> int:
        return self.window_count if self.telemetry == "running" else self.last_report

    def tick_second(self) -> None:
        self.flush()
        if self.window_count > 0:
            self.last_report = self.window_count
            self.silent_windows = 0
        else:
            self.silent_windows += 1
            if not self.aging:
                self.last_report = 0
            elif self.silent_windows >= self.age_after:
                self.last_report = int(self.last_report * self.decay)
        self.window_count = 0
        self.hh.rotate()

    def hh_top_k(self, k: int) -> list[tuple[ObjectId, int]]:
        """Hottest keys of the last completed epoch (reported keys plus cached ones)."""
        return self.hh.top_k(k, extra=list(self.entries))
