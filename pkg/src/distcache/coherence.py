"""Two-phase cache coherence between a storage server and the caches holding a key.

Phase 1 sends one invalidation that visits every replica in turn; the last hop
acknowledges to the server, which then applies the write and acks the client.
Phase 2 pushes the new value with its version. Cache insertions reuse phase 2:
the agent reserves an invalid slot and asks the server to fill it, serialized
with the writes on that key.

The server is transport-agnostic: every handler returns a list of effects
(messages to send, client acks, timers) for the caller to deliver.
"""

from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .cache_node import CacheNode
from .hashing import ObjectId, key_index, object_key
from .workload import value_for

TIMEOUT = 0.010
MAX_RETRIES = 5

Node = tuple


# ---- wire records ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Invalidate:
    key: ObjectId
    version: int
    path: tuple
    hop: int = 0


@dataclass(frozen=True)
class InvAck:
    key: ObjectId
    version: int


@dataclass(frozen=True)
class Update:
    key: ObjectId
    version: int
    value: bytes
    token: int | None = None  # present on insertion fills


@dataclass(frozen=True)
class UpdAck:
    key: ObjectId
    version: int
    node: Node = None


@dataclass(frozen=True)
class Write:
    key: ObjectId
    value: bytes


@dataclass(frozen=True)
class WriteAck:
    key: ObjectId
    version: int
    ok: bool = True


@dataclass(frozen=True)
class Get:
    key: ObjectId


@dataclass(frozen=True)
class GetReply:
    key: ObjectId
    value: bytes | None
    version: int
    stamps: tuple = ()


# ---- effects --------------------------------------------------------------------------------

HOME = "home"


@dataclass(frozen=True)
class Send:
    dest: object  # cache node or HOME
    msg: object


@dataclass(frozen=True)
class ClientAck:
    client: object
    ack: WriteAck


@dataclass(frozen=True)
class Timer:
    at: float
    key: ObjectId
    txid: int
    attempt: int


class Phase(enum.IntEnum):
    INVALIDATING = 0
    ACKED_TO_CLIENT = 1
    UPDATING = 2
    DONE = 3


@dataclass
class WriteTransaction:
    txid: int
    kind: str  # "write" | "fill"
    key: ObjectId
    value: bytes | None
    version: int
    client: object = None
    phase: Phase = Phase.INVALIDATING
    path: tuple = ()
    pending_invalidations: set = field(default_factory=set)
    pending_updates: set = field(default_factory=set)
    attempt: int = 0
    timeout_at: float = 0.0
    fill_node: Node = None
    fill_token: int | None = None
    failed: bool = False

    def advance(self, phase: Phase) -> None:
        if phase < self.phase:
            raise RuntimeError("transaction phases only move forward")
        if phase >= Phase.ACKED_TO_CLIENT and self.pending_invalidations:
            raise RuntimeError("cannot ack before every copy is invalidated")
        self.phase = phase


@dataclass
class ServerKeyState:
    primary_value: bytes
    committed_version: int = 0
    next_version: int = 1


class StorageServer:
    """Home server of a set of keys; owns versions and drives both phases."""

    def __init__(self, replicas: Callable[[ObjectId], Sequence[Node]],
                 initial_value: Callable[[ObjectId], bytes] | None = None,
                 timeout: float = TIMEOUT, max_retries: int = MAX_RETRIES, order: str = "upper_first"):
        self.replicas = replicas
        self.initial_value = initial_value or (lambda k: value_for(key_index(k) & (2**63 - 1), 0))
        self.timeout = timeout
        self.max_retries = max_retries
        if order not in ("upper_first", "lower_first"):
            raise ValueError("order must be 'upper_first' or 'lower_first'")
        self.order = order
        self.state: dict = {}
        self.tx: dict = {}
        self.queued: dict = {}
        self._txid = 0
        self.counts = {"invalidate": 0, "update": 0, "retransmit": 0, "failed": 0}

    def key_state(self, key: ObjectId) -> ServerKeyState:
        st = self.state.get(key)
        if st is None:
            st = self.state[key] = ServerKeyState(self.initial_value(key))
        return st

    def read(self, key: ObjectId) -> tuple[bytes, int]:
        st = self.key_state(key)
        return st.primary_value, st.committed_version

    def _path(self, key: ObjectId) -> tuple:
        nodes = sorted(set(self.replicas(key)), key=lambda v: (v[0] != "upper", v[1]))
        if self.order == "lower_first":
            nodes.sort(key=lambda v: (v[0] != "lower", v[1]))
        return tuple(nodes)

    # -- entry points --

    def write(self, key: ObjectId, value: bytes, client: object, now: float) -> list:
        return self._submit(key, ("write", value, client, None, None), now)

    def request_fill(self, key: ObjectId, node: Node, token: int | None, now: float) -> list:
        """Agent notification after reserving an invalid slot at ``node``."""
        return self._submit(key, ("fill", None, None, node, token), now)

    def _submit(self, key, op, now) -> list:
        if key in self.tx:
            self.queued.setdefault(key, deque()).append(op)
            return []
        return self._start(key, op, now)

    def _start(self, key, op, now) -> list:
        kind, value, client, node, token = op
        st = self.key_state(key)
        self._txid += 1
        if kind == "fill":
            tx = WriteTransaction(self._txid, "fill", key, st.primary_value, st.committed_version,
                                  fill_node=node, fill_token=token)
            self.tx[key] = tx
            return self._phase2(tx, now, (node,))
        version = st.next_version
        st.next_version += 1
        path = self._path(key)
        tx = WriteTransaction(self._txid, "write", key, value, version, client, path=path)
        if not path:
            st.primary_value, st.committed_version = value, version
            tx.advance(Phase.DONE)
            return [ClientAck(client, WriteAck(key, version))]
        self.tx[key] = tx
        tx.pending_invalidations = set(path)
        return self._send_invalidate(tx, now)

    def _send_invalidate(self, tx: WriteTransaction, now: float) -> list:
        self.counts["invalidate"] += 1
        tx.timeout_at = now + self.timeout
        msg = Invalidate(tx.key, tx.version, tx.path)
        return [Send(tx.path[0], msg), Timer(tx.timeout_at, tx.key, tx.txid, tx.attempt)]

    def _phase2(self, tx: WriteTransaction, now: float, nodes) -> list:
        tx.advance(Phase.UPDATING)
        tx.pending_updates = set(nodes)
        return self._send_updates(tx, now)

    def _send_updates(self, tx: WriteTransaction, now: float) -> list:
        out = []
        for v in sorted(tx.pending_updates):
            self.counts["update"] += 1
            out.append(Send(v, Update(tx.key, tx.version, tx.value, tx.fill_token if tx.kind == "fill" else None)))
        tx.timeout_at = now + self.timeout
        out.append(Timer(tx.timeout_at, tx.key, tx.txid, tx.attempt))
        return out

    def _finish(self, tx: WriteTransaction, now: float) -> list:
        tx.advance(Phase.DONE)
        del self.tx[tx.key]
        q = self.queued.get(tx.key)
        if q:
            op = q.popleft()
            if not q:
                del self.queued[tx.key]
            return self._start(tx.key, op, now)
        return []

    # -- protocol messages --

    def receive(self, msg, now: float) -> list:
        tx = self.tx.get(msg.key)
        if tx is None or msg.version != tx.version:
            return []  # duplicate or late
        if isinstance(msg, InvAck) and tx.phase is Phase.INVALIDATING:
            tx.pending_invalidations.clear()
            st = self.key_state(tx.key)
            st.primary_value, st.committed_version = tx.value, tx.version
            tx.advance(Phase.ACKED_TO_CLIENT)
            tx.attempt = 0
            out = [ClientAck(tx.client, WriteAck(tx.key, tx.version))]
            return out + self._phase2(tx, now, tx.path)
        if isinstance(msg, UpdAck) and tx.phase is Phase.UPDATING:
            tx.pending_updates.discard(msg.node)
            if not tx.pending_updates:
                return self._finish(tx, now)
        return []

    def on_timer(self, key: ObjectId, txid: int, attempt: int, now: float) -> list:
        tx = self.tx.get(key)
        if tx is None or tx.txid != txid or tx.attempt != attempt:
            return []
        tx.attempt += 1
        if tx.phase is Phase.INVALIDATING:
            if tx.attempt <= self.max_retries:
                self.counts["retransmit"] += 1
                return self._send_invalidate(tx, now)
            # give up: the client hears a failure; copies already invalidated at this
            # version get the old value back under the same version
            self.counts["failed"] += 1
            st = self.key_state(key)
            st.committed_version = tx.version
            tx.value, tx.failed = st.primary_value, True
            tx.pending_invalidations.clear()
            tx.attempt = 0
            out = [ClientAck(tx.client, WriteAck(key, tx.version, ok=False))]
            return out + self._phase2(tx, now, tx.path)
        if tx.phase is Phase.UPDATING:
            if tx.attempt <= self.max_retries:
                self.counts["retransmit"] += 1
                return self._send_updates(tx, now)
            # copies that never answered stay invalid until their next fill
            return self._finish(tx, now)
        return []

    def in_flight(self) -> int:
        return len(self.tx)


def cache_receive(node: CacheNode, me: Node, msg) -> list:
    """Cache-side handling of coherence packets; returns what the node sends."""
    if isinstance(msg, Invalidate):
        node.invalidate(msg.key, msg.version)
        if msg.hop + 1 < len(msg.path):
            return [Send(msg.path[msg.hop + 1], replace(msg, hop=msg.hop + 1))]
        return [Send(HOME, InvAck(msg.key, msg.version))]
    if isinstance(msg, Update):
        node.apply_update(msg.key, msg.value, msg.version, msg.token)
        return [Send(HOME, UpdAck(msg.key, msg.version, me))]
    raise TypeError(f"cache nodes do not handle {type(msg).__name__}")


def insert_hot_object(node: CacheNode, me: Node, key: ObjectId, server: StorageServer, now: float,
                      owns: Callable[[ObjectId], bool] | None = None) -> tuple[ObjectId | None, list]:
    """Agent-side insertion: reserve an invalid slot, then ask the server to fill it."""
    if owns is not None and not owns(key):
        from .allocation import PartitionViolation

        raise PartitionViolation(f"{key.hex()} is outside the partition of {me}")
    victim = node.reserve(key)
    e = node.peek(key)
    if e.fill_token is None and e.valid:
        return victim, []
    return victim, server.request_fill(key, me, e.fill_token, now)


# ---- fault-injection harness ---------------------------------------------------------------


@dataclass
class MonitorReport:
    operations: int = 0
    reads: int = 0
    writes: int = 0
    hits: int = 0
    stale_reads: int = 0
    regressions: int = 0
    failed_writes: int = 0
    dropped: int = 0
    duplicated: int = 0
    fills: int = 0


class CoherenceHarness:
    """Randomized message-level check of the protocol.

    One home server and two cache nodes per key (or ``replicas`` nodes for the
    replication layout). Delays are exponential, so packets reorder freely;
    coherence packets are dropped or duplicated with the given probabilities.
    A monitor records the highest version acked to any client per key and
    flags any cache hit below it, and any per-node version that goes down.
    """

    def __init__(self, seed: int, keys: int = 200, hot: int = 40, replicas: int = 2, skew: float = 0.9,
                 write_ratio: float = 0.2, drop: float = 0.01, dup: float = 0.01, mean_delay: float = 0.002,
                 op_gap: float = 0.0005, churn: float = 0.002, order: str = "upper_first"):
        from .workload import TableSampler, zipf_probs

        self.rng = np.random.default_rng([seed, 0xC0DE])
        self.keys = [object_key(i) for i in range(keys)]
        self.sampler = TableSampler(zipf_probs(keys, skew))
        self.write_ratio, self.drop, self.dup = write_ratio, drop, dup
        self.mean_delay, self.op_gap, self.churn = mean_delay, op_gap, churn
        self.nodes = {("upper", i): CacheNode(i, slots=hot) for i in range(replicas - 1)}
        self.nodes[("lower", 0)] = CacheNode(replicas - 1, slots=hot)
        self.holders: dict = {}
        self.server = StorageServer(lambda k: self.holders.get(k, ()), order=order)
        for k in self.keys[:hot]:
            for v, n in self.nodes.items():
                n.install(k, self.server.read(k)[0], 0)
            self.holders[k] = tuple(self.nodes)
        self.acked: dict = {}
        self.node_versions: dict = {}
        self.report = MonitorReport()
        self._events: list = []
        self._seq = 0

    def _push(self, t: float, item) -> None:
        self._seq += 1
        heapq.heappush(self._events, (t, self._seq, item))

    def _deliver(self, now: float, effects: list) -> None:
        for e in effects:
            if isinstance(e, Send):
                copies = 1
                if self.rng.random() < self.drop:
                    self.report.dropped += 1
                    copies = 0
                elif self.rng.random() < self.dup:
                    self.report.duplicated += 1
                    copies = 2
                for _ in range(copies):
                    self._push(now + self.rng.exponential(self.mean_delay), ("msg", e.dest, e.msg))
            elif isinstance(e, ClientAck):
                # client learns the outcome after one more network hop
                self._push(now + self.rng.exponential(self.mean_delay), ("ack", e.ack))
            elif isinstance(e, Timer):
                self._push(e.at, ("timer", e))

    def _check_version(self, v: Node, k: ObjectId) -> None:
        e = self.nodes[v].peek(k)
        if e is None:
            return
        prev = self.node_versions.get((v, k), 0)
        if e.version < prev:
            self.report.regressions += 1
        self.node_versions[(v, k)] = max(prev, e.version)

    def _handle(self, now: float, item) -> None:
        kind = item[0]
        if kind == "msg":
            _, dest, msg = item
            if dest == HOME:
                self._deliver(now, self.server.receive(msg, now))
            else:
                self._deliver(now, cache_receive(self.nodes[dest], dest, msg))
                self._check_version(dest, msg.key)
        elif kind == "timer":
            t = item[1]
            self._deliver(now, self.server.on_timer(t.key, t.txid, t.attempt, now))
        elif kind == "ack":
            ack = item[1]
            if ack.ok:
                self.acked[ack.key] = max(self.acked.get(ack.key, 0), ack.version)
            else:
                self.report.failed_writes += 1

    def _op(self, now: float, i: int) -> None:
        k = self.keys[int(self.sampler.sample(self.rng, 1)[0])]
        self.report.operations += 1
        if self.rng.random() < self.write_ratio:
            self.report.writes += 1
            self._deliver(now, self.server.write(k, value_for(key_index(k), i + 1), ("c", i), now))
        else:
            self.report.reads += 1
            holders = self.holders.get(k, ())
            floor = self.acked.get(k, 0)
            if holders:
                v = holders[int(self.rng.integers(len(holders)))]
                hit = self.nodes[v].cache_get(k)
                if hit is not None:
                    self.report.hits += 1
                    if hit.version < floor:
                        self.report.stale_reads += 1
                    return
            _, version = self.server.read(k)
            if version < floor:
                self.report.stale_reads += 1
        if self.rng.random() < self.churn:
            self._churn(now)

    def _churn(self, now: float) -> None:
        # evict one cached key from a random node and insert a random uncached one
        v = list(self.nodes)[int(self.rng.integers(len(self.nodes)))]
        node = self.nodes[v]
        cached = node.cached_keys()
        if cached:
            old = cached[int(self.rng.integers(len(cached)))]
            node.evict(old)
            self.node_versions.pop((v, old), None)  # a new slot starts a new lifetime
            self.holders[old] = tuple(x for x in self.holders.get(old, ()) if x != v)
        cand = [k for k in self.keys if not node.is_cached(k)]
        k = cand[int(self.rng.integers(len(cand)))]
        self.holders[k] = tuple(sorted(set(self.holders.get(k, ())) | {v}))
        self.report.fills += 1
        _, eff = insert_hot_object(node, v, k, self.server, now)
        self._deliver(now, eff)

    def run(self, operations: int) -> MonitorReport:
        t = 0.0
        for i in range(operations):
            t += self.rng.exponential(self.op_gap)
            while self._events and self._events[0][0] <= t:
                now, _, item = heapq.heappop(self._events)
                self._handle(now, item)
            self._op(t, i)
        while self._events:
            now, _, item = heapq.heappop(self._events)
            self._handle(now, item)
        return self.report
